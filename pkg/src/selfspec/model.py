"""GPT-style decoder with per-layer skip sets, KV caching, and hidden-state taps.

The draft model and the full model are the same weight object; a DraftSpec
selects which attention/MLP sub-blocks are bypassed (residual passthrough).
Layer indices are 1-based on every public surface (specs, taps, statistics);
internal arrays are 0-based.

Batch size is fixed at 1: a forward processes one block of token positions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from . import kernels
from .kernels import F32, F64

ROPE_BASE = 10000.0

# tap(layer_1based, kind, x_rows, y_rows) with kind in {"attn", "mlp"};
# x/y are read-only [T, H] views of the hidden states entering/leaving the
# sub-block, one row per token position. Removed sub-blocks tap with y = x.
Tap = Callable[[int, str, np.ndarray, np.ndarray], None]


class CapacityError(RuntimeError):
    """A forward would exceed the cache's maximum sequence length."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_size: int
    num_heads: int
    mlp_dim: int
    vocab_size: int
    max_seq_len: int
    norm_eps: float = 1e-5
    eos_token_id: Optional[int] = None

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden_size % self.num_heads != 0:
            raise ValueError("hidden_size must be divisible by num_heads")
        if (self.hidden_size // self.num_heads) % 2 != 0:
            raise ValueError("head_dim must be even (rotary pairs)")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if self.mlp_dim < 1:
            raise ValueError("mlp_dim must be >= 1")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be > 0")
        if self.eos_token_id is not None and not 0 <= self.eos_token_id < self.vocab_size:
            raise ValueError("eos_token_id out of vocab range")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "num_heads": self.num_heads,
            "mlp_dim": self.mlp_dim,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "norm_eps": self.norm_eps,
            "eos_token_id": self.eos_token_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerWeights:
    attn_norm: np.ndarray  # [H]
    wq: np.ndarray  # [H, H]
    wk: np.ndarray  # [H, H]
    wv: np.ndarray  # [H, H]
    wo: np.ndarray  # [H, H]
    mlp_norm: np.ndarray  # [H]
    w_gate: np.ndarray  # [H, mlp_dim]
    w_up: np.ndarray  # [H, mlp_dim]
    w_down: np.ndarray  # [mlp_dim, H]


# (field name, shape template) with H=hidden, M=mlp_dim; checkpoint I/O and
# shape validation both walk this table.
LAYER_TENSORS = (
    ("attn_norm", ("H",)),
    ("wq", ("H", "H")),
    ("wk", ("H", "H")),
    ("wv", ("H", "H")),
    ("wo", ("H", "H")),
    ("mlp_norm", ("H",)),
    ("w_gate", ("H", "M")),
    ("w_up", ("H", "M")),
    ("w_down", ("M", "H")),
)


@dataclass
class Weights:
    config: ModelConfig
    embedding: np.ndarray  # [V, H]
    layers: list[LayerWeights]
    final_norm: np.ndarray  # [H]
    lm_head: np.ndarray  # [H, V]

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        cfg = self.config
        dims = {"H": cfg.hidden_size, "M": cfg.mlp_dim}
        if len(self.layers) != cfg.num_layers:
            raise ValueError(f"expected {cfg.num_layers} layers, got {len(self.layers)}")
        expect = {
            "embedding": (cfg.vocab_size, cfg.hidden_size),
            "final_norm": (cfg.hidden_size,),
            "lm_head": (cfg.hidden_size, cfg.vocab_size),
        }
        for name, shape in expect.items():
            t = getattr(self, name)
            if t.shape != shape:
                raise ValueError(f"{name} shape {t.shape} != {shape}")
            if not np.isfinite(t).all():
                raise ValueError(f"{name} contains non-finite values")
        for i, lw in enumerate(self.layers):
            for fname, tmpl in LAYER_TENSORS:
                t = getattr(lw, fname)
                shape = tuple(dims[d] for d in tmpl)
                if t.shape != shape:
                    raise ValueError(f"layer {i + 1} {fname} shape {t.shape} != {shape}")
                if not np.isfinite(t).all():
                    raise ValueError(f"layer {i + 1} {fname} contains non-finite values")


@dataclass(frozen=True)
class DraftSpec:
    """Sets of 1-based layer indices whose attention / MLP sub-blocks are skipped.

    Empty sets denote the full model. MLP removals never occur without the
    matching attention removal.
    """

    remove_attn: frozenset[int] = frozenset()
    remove_mlp: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "remove_attn", frozenset(self.remove_attn))
        object.__setattr__(self, "remove_mlp", frozenset(self.remove_mlp))
        if any(l < 1 for l in self.remove_attn | self.remove_mlp):
            raise ValueError("layer indices are 1-based")
        if not self.remove_mlp <= self.remove_attn:
            raise ValueError("remove_mlp must be a subset of remove_attn")

    @classmethod
    def empty(cls) -> "DraftSpec":
        return cls(frozenset(), frozenset())

    def is_empty(self) -> bool:
        return not self.remove_attn and not self.remove_mlp

    def retained_attn(self, num_layers: int) -> list[int]:
        return [l for l in range(1, num_layers + 1) if l not in self.remove_attn]


class KvCache:
    """Per-layer key/value history with an explicit length and truncation.

    One `len` counts populated token positions; layers skipped by the spec in
    force simply never read or write their rows. Rows below `len` are only
    ever rewritten through copy_range_from (draft-cache refresh), never by
    forward passes.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        shape = (config.max_seq_len, config.hidden_size)
        self.keys = [np.zeros(shape, dtype=F32) for _ in range(config.num_layers)]
        self.values = [np.zeros(shape, dtype=F32) for _ in range(config.num_layers)]
        self._len = 0

    @property
    def len(self) -> int:
        return self._len

    def truncate(self, new_len: int) -> None:
        if new_len > self._len:
            raise ValueError(f"cannot truncate cache of length {self._len} to {new_len}")
        if new_len < 0:
            raise ValueError("negative cache length")
        self._len = new_len

    def copy_range_from(self, src: "KvCache", layers: list[int], start: int, stop: int) -> None:
        """Overwrite rows [start, stop) at the given 1-based layers from src."""
        for l in layers:
            self.keys[l - 1][start:stop] = src.keys[l - 1][start:stop]
            self.values[l - 1][start:stop] = src.values[l - 1][start:stop]
        self._len = max(self._len, stop)
        if stop > src.len:
            raise ValueError("copy range exceeds source cache length")


class LayerTimer:
    """Accumulates wall time per (layer, sub-block kind) across forward calls.

    One forward block counts as one invocation per retained sub-block.
    """

    def __init__(self, num_layers: int):
        self.seconds = {"attn": np.zeros(num_layers), "mlp": np.zeros(num_layers)}
        self.calls = {"attn": np.zeros(num_layers, dtype=np.int64), "mlp": np.zeros(num_layers, dtype=np.int64)}

    def add(self, layer: int, kind: str, seconds: float) -> None:
        self.seconds[kind][layer - 1] += seconds
        self.calls[kind][layer - 1] += 1

    def mean_ms(self, kind: str) -> np.ndarray:
        """Per-layer mean milliseconds per invocation (NaN where never called)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.calls[kind] > 0, self.seconds[kind] * 1e3 / self.calls[kind], np.nan)


@lru_cache(maxsize=16)
def _rope_tables(max_seq_len: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = ROPE_BASE ** (-np.arange(0, head_dim, 2, dtype=F64) / head_dim)
    angles = np.arange(max_seq_len, dtype=F64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=1)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=1)
    return cos, sin


def _apply_rope(x: np.ndarray, positions: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate [T, num_heads, head_dim] float64 q/k rows at absolute positions."""
    c = cos[positions][:, None, :]
    s = sin[positions][:, None, :]
    half = x.shape[-1] // 2
    rotated = np.concatenate([-x[..., half:], x[..., :half]], axis=-1)
    return x * c + rotated * s


def _readonly(a: np.ndarray) -> np.ndarray:
    v = a.view()
    v.flags.writeable = False
    return v


def attention_sublayer(
    lw: LayerWeights,
    config: ModelConfig,
    x: np.ndarray,
    past_k: np.ndarray,
    past_v: np.ndarray,
    start_pos: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pre-norm causal attention over (past keys + this block).

    Returns (residual update [T, H], new key rows [T, H], new value rows [T, H]).
    The new rows are rotary-encoded at absolute positions start_pos..start_pos+T-1.
    """
    nh, dh = config.num_heads, config.head_dim
    T = x.shape[0]
    cos, sin = _rope_tables(config.max_seq_len, dh)
    positions = np.arange(start_pos, start_pos + T)

    xn = kernels.rms_norm(x, lw.attn_norm, config.norm_eps)
    q = kernels.matmul(xn, lw.wq).astype(F64).reshape(T, nh, dh)
    k = kernels.matmul(xn, lw.wk).astype(F64).reshape(T, nh, dh)
    v_new = kernels.matmul(xn, lw.wv)

    q = _apply_rope(q, positions, cos, sin)
    k_new = _apply_rope(k, positions, cos, sin).reshape(T, config.hidden_size).astype(F32)

    S = start_pos + T
    keys = np.concatenate([past_k[:start_pos], k_new], axis=0) if start_pos else k_new
    vals = np.concatenate([past_v[:start_pos], v_new], axis=0) if start_pos else v_new

    qh = q.transpose(1, 0, 2)  # [nh, T, dh], already f64
    kh = keys.astype(F64).reshape(S, nh, dh).transpose(1, 2, 0)  # [nh, dh, S]
    vh = vals.astype(F64).reshape(S, nh, dh).transpose(1, 0, 2)  # [nh, S, dh]

    scores = (qh @ kh) / np.sqrt(dh)
    allowed = np.arange(S)[None, :] <= positions[:, None]
    scores = np.where(allowed[None, :, :], scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)

    heads = (probs @ vh).transpose(1, 0, 2).reshape(T, config.hidden_size).astype(F32)
    return kernels.matmul(heads, lw.wo), k_new, v_new


def mlp_sublayer(lw: LayerWeights, config: ModelConfig, x: np.ndarray) -> np.ndarray:
    """Pre-norm gated MLP; returns the residual update [T, H]."""
    xn = kernels.rms_norm(x, lw.mlp_norm, config.norm_eps)
    gate = kernels.silu(kernels.matmul(xn, lw.w_gate))
    up = kernels.matmul(xn, lw.w_up)
    return kernels.matmul(gate * up, lw.w_down)


def forward(
    weights: Weights,
    tokens: list[int] | np.ndarray,
    cache: KvCache,
    spec: DraftSpec = DraftSpec(),
    tap: Optional[Tap] = None,
    timer: Optional[LayerTimer] = None,
) -> np.ndarray:
    """Process a block of tokens, returning next-token logits at every position.

    Appends one cache entry per position for every retained attention layer
    and advances cache.len by len(tokens). Skipped sub-blocks pass the
    residual stream through unchanged and write nothing; the tap still sees
    them (with y = x) so per-layer statistics stay comparable across specs.
    """
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("tokens must be a nonempty 1-D sequence")
    T = int(tokens.shape[0])
    base = cache.len
    if base + T > cfg.max_seq_len:
        raise CapacityError(f"cache {base} + block {T} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocab range")
    if spec.remove_attn and max(spec.remove_attn) > cfg.num_layers:
        raise ValueError("draft spec indexes a layer beyond num_layers")

    h = weights.embedding[tokens]
    for layer in range(1, cfg.num_layers + 1):
        lw = weights.layers[layer - 1]

        x = h
        if layer in spec.remove_attn:
            if tap is not None:
                ro = _readonly(x)
                tap(layer, "attn", ro, ro)
        else:
            t0 = time.perf_counter() if timer is not None else 0.0
            out, k_new, v_new = attention_sublayer(
                lw, cfg, x, cache.keys[layer - 1], cache.values[layer - 1], base
            )
            cache.keys[layer - 1][base : base + T] = k_new
            cache.values[layer - 1][base : base + T] = v_new
            h = x + out
            if timer is not None:
                timer.add(layer, "attn", time.perf_counter() - t0)
            if tap is not None:
                tap(layer, "attn", _readonly(x), _readonly(h))

        x = h
        if layer in spec.remove_mlp:
            if tap is not None:
                ro = _readonly(x)
                tap(layer, "mlp", ro, ro)
        else:
            t0 = time.perf_counter() if timer is not None else 0.0
            h = x + mlp_sublayer(lw, cfg, x)
            if timer is not None:
                timer.add(layer, "mlp", time.perf_counter() - t0)
            if tap is not None:
                tap(layer, "mlp", _readonly(x), _readonly(h))

    cache.truncate_guard = None  # no-op attribute to keep mutation local; len advances below
    cache._len = base + T
    logits = kernels.matmul(kernels.rms_norm(h, weights.final_norm, cfg.norm_eps), weights.lm_head)
    return logits


def flops_per_token(config: ModelConfig, spec: DraftSpec, context_len: int) -> int:
    """Multiply-accumulate count of one decode step under the skip set.

    Counts matmul MACs only (projections, attention scores/values, LM head);
    norms, rotary encoding, softmax, and the embedding lookup are excluded.
    Per retained attention layer: 4*H^2 + 2*context_len*H. Per retained MLP:
    3*H*mlp_dim. Always: H*V for the LM head.
    """
    H, M, V = config.hidden_size, config.mlp_dim, config.vocab_size
    total = H * V
    for layer in range(1, config.num_layers + 1):
        if layer not in spec.remove_attn:
            total += 4 * H * H + 2 * context_len * H
        if layer not in spec.remove_mlp:
            total += 3 * H * M
    return total
