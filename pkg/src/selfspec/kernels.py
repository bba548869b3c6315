"""Dense numeric kernels for the toy decoder.

All kernels take and return float32 arrays but accumulate in float64
internally. Besides keeping softmax and similarity statistics stable, this
makes results row-reproducible: the same input row produces bitwise-identical
float32 output whether it is processed alone or inside a batch, which the
draft/verify exactness guarantees lean on.

Kernels are pure functions on caller-owned buffers; no shared mutable state.
"""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

F32 = np.float32
F64 = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested kernel."""


def _as_f64(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=F64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-major matrix product, float64-accumulated, float32 result."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return (_as_f64(a) @ _as_f64(b)).astype(F32)


def row_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of a single logit row at the given temperature.

    temperature == 0 returns the one-hot argmax distribution, ties broken
    toward the lowest index.
    """
    if logits.ndim != 1 or logits.size == 0:
        raise ShapeError(f"row_softmax expects a nonempty vector, got shape {logits.shape}")
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        out = np.zeros(logits.shape[0], dtype=F32)
        out[int(np.argmax(logits))] = 1.0
        return out
    z = _as_f64(logits) / float(temperature)
    z -= z.max()
    e = np.exp(z)
    return (e / e.sum()).astype(F32)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D score matrix (temperature 1).

    Rows may contain -inf entries (masked positions); a fully masked row is a
    caller bug and will produce NaNs.
    """
    if scores.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {scores.shape}")
    z = scores.astype(F64, copy=True)
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(F32)


def cosine_sim(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    A zero-norm operand yields 0.0 with a logged warning: a degenerate row
    carries no evidence, so downstream layer-removal logic must never act on
    it. Pairs that saturate the Cauchy-Schwarz bound under rounding are
    snapped to exactly +/-1.0, so cosine_sim(x, x) == 1.0 holds bitwise.
    """
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"cosine_sim expects equal-length vectors, got {x.shape}, {y.shape}")
    xd = _as_f64(x)
    yd = _as_f64(y)
    dot = float(xd @ yd)
    nx2 = float(xd @ xd)
    ny2 = float(yd @ yd)
    if nx2 == 0.0 or ny2 == 0.0:
        log.warning("cosine_sim: zero-norm operand, returning 0.0")
        return 0.0
    if dot * dot >= nx2 * ny2:
        return 1.0 if dot > 0 else -1.0
    return float(np.clip(dot / np.sqrt(nx2 * ny2), -1.0, 1.0))


def cosine_sim_rows(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of two equal-shape matrices (float64).

    Same conventions as cosine_sim: zero-norm rows give 0.0 (with one warning
    per call), saturated rows give exactly +/-1.0.
    """
    if x.shape != y.shape or x.ndim != 2:
        raise ShapeError(f"cosine_sim_rows expects equal-shape matrices, got {x.shape}, {y.shape}")
    xd = _as_f64(x)
    yd = _as_f64(y)
    dot = np.einsum("ij,ij->i", xd, yd)
    nx2 = np.einsum("ij,ij->i", xd, xd)
    ny2 = np.einsum("ij,ij->i", yd, yd)
    degenerate = (nx2 == 0.0) | (ny2 == 0.0)
    if degenerate.any():
        log.warning("cosine_sim_rows: %d zero-norm rows, returning 0.0 for them", int(degenerate.sum()))
    denom2 = nx2 * ny2
    saturated = dot * dot >= denom2
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.clip(dot / np.sqrt(denom2), -1.0, 1.0)
    out[saturated] = np.sign(dot[saturated])
    out[degenerate] = 0.0
    return out


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    """RMS normalization over the last axis: x * gain / sqrt(mean(x^2) + eps)."""
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if x.shape[-1] != gain.shape[0] or gain.ndim != 1:
        raise ShapeError(f"rms_norm gain shape {gain.shape} does not match input {x.shape}")
    xd = _as_f64(x)
    ms = np.mean(xd * xd, axis=-1, keepdims=True)
    return (xd * _as_f64(gain) / np.sqrt(ms + eps)).astype(F32)


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x), elementwise."""
    xd = _as_f64(x)
    return (xd / (1.0 + np.exp(-xd))).astype(F32)
