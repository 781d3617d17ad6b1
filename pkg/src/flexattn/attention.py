"""Causal self-attention, hierarchical self-attention and cross-attention.

All three share one multi-head scaled dot-product core.  Every operator
returns the head-averaged post-softmax map alongside its output, because
high-resolution token selection in the next layer is driven by it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyInputError, ShapeError
from .tensor import (
    FlopCounter,
    Matrix,
    block,
    concat_rows,
    divide,
    matmul,
    mean_heads,
    merge_heads,
    softmax_rows,
    split_heads,
    transpose,
)


@dataclass(frozen=True)
class AttentionWeights:
    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    heads: int = 1
    w_k_prime: Matrix | None = None
    w_v_prime: Matrix | None = None

    def __post_init__(self):
        d = self.w_q.rows
        if d % self.heads:
            raise ConfigError(f"hidden size {d} not divisible by {self.heads} heads")
        for name in ("w_q", "w_k", "w_v", "w_o", "w_k_prime", "w_v_prime"):
            w = getattr(self, name)
            if w is not None and w.shape != (d, d):
                raise ShapeError(f"{name} has shape {w.shape}, expected {(d, d)}")
        if (self.w_k_prime is None) != (self.w_v_prime is None):
            raise ConfigError("w_k_prime and w_v_prime must be given together")

    @property
    def width(self) -> int:
        return self.w_q.rows

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def is_flex(self) -> bool:
        return self.w_k_prime is not None

    def matrices(self) -> list[Matrix]:
        out = [self.w_q, self.w_k, self.w_v, self.w_o]
        if self.is_flex:
            out += [self.w_k_prime, self.w_v_prime]
        return out


@dataclass(frozen=True)
class AttentionMap:
    """Head-averaged attention weights; row i is query i's distribution over keys."""

    values: Matrix
    head_reduction: str = "mean"
    causal: bool = True

    @property
    def rows(self) -> int:
        return self.values.rows

    @property
    def cols(self) -> int:
        return self.values.cols

    def numpy(self) -> np.ndarray:
        return self.values.data

    def last_row(self) -> np.ndarray:
        return self.values.data[..., -1, :]


def causal_mask(n: int, extra: int = 0) -> np.ndarray:
    """Additive mask for n queries over n sequence keys followed by ``extra`` always-visible keys."""
    mask = np.zeros((n, n + extra))
    mask[:, :n][np.triu_indices(n, 1)] = -np.inf
    return mask


def _attend(q: Matrix, k: Matrix, v: Matrix, heads: int, mask, ctr):
    """Multi-head softmax(q k^T / sqrt(d)) v on already-projected q, k, v."""
    d = q.cols // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = divide(matmul(qh, transpose(kh), ctr), math.sqrt(d), ctr)
    probs = softmax_rows(scores, mask, ctr)
    return merge_heads(matmul(probs, vh, ctr)), probs


def _check_input(h: Matrix, w: AttentionWeights, what: str) -> None:
    if h.rows == 0:
        raise EmptyInputError(f"{what}: empty input sequence")
    if h.cols != w.width:
        raise ShapeError(f"{what}: input width {h.cols} != weight width {w.width}")


def self_attention(h: Matrix, w: AttentionWeights, causal: bool = True,
                   ctr: FlopCounter | None = None) -> tuple[Matrix, AttentionMap]:
    """Multi-head self-attention; residual and layer norm are left to the caller."""
    _check_input(h, w, "self_attention")
    q, k, v = matmul(h, w.w_q, ctr), matmul(h, w.w_k, ctr), matmul(h, w.w_v, ctr)
    mask = causal_mask(h.rows) if causal else None
    ctx, probs = _attend(q, k, v, w.heads, mask, ctr)
    return matmul(ctx, w.w_o, ctr), AttentionMap(mean_heads(probs), causal=causal)


def hierarchical_self_attention(h: Matrix, f_shr: Matrix, w: AttentionWeights,
                                causal: bool = True, ctr: FlopCounter | None = None,
                                hr_visible: np.ndarray | None = None
                                ) -> tuple[Matrix, AttentionMap, AttentionMap]:
    """Queries from ``h``; keys/values from ``h`` and the selected HR tokens ``f_shr``.

    HR tokens are projected by their own ``w_k_prime``/``w_v_prime``.  The
    causal mask covers only the N sequence keys: every query sees all M HR
    keys, unless ``hr_visible`` (N x M booleans) restricts them per query.

    Returns the output, the full N x (N+M) map, and its first N x N block
    (not renormalised).
    """
    _check_input(h, w, "hierarchical_self_attention")
    if not w.is_flex:
        raise ConfigError("hierarchical attention needs w_k_prime and w_v_prime")
    if f_shr.cols != w.width:
        raise ShapeError(f"HR token width {f_shr.cols} != weight width {w.width}")
    n, m = h.rows, f_shr.rows
    q = matmul(h, w.w_q, ctr)
    k = concat_rows(matmul(h, w.w_k, ctr), matmul(f_shr, w.w_k_prime, ctr))
    v = concat_rows(matmul(h, w.w_v, ctr), matmul(f_shr, w.w_v_prime, ctr))
    mask = causal_mask(n, m) if causal else np.zeros((n, n + m))
    if hr_visible is not None:
        hr_visible = np.asarray(hr_visible, dtype=bool)
        if hr_visible.shape != (n, m):
            raise ShapeError(f"hr_visible shape {hr_visible.shape} != {(n, m)}")
        mask[:, n:][~hr_visible] = -np.inf
    if not causal and hr_visible is None:
        mask = None
    ctx, probs = _attend(q, k, v, w.heads, mask, ctr)
    full = mean_heads(probs)
    return (matmul(ctx, w.w_o, ctr),
            AttentionMap(full, causal=causal),
            AttentionMap(block(full, cols=slice(0, n)), causal=causal))


def cross_attention(h: Matrix, f_hr: Matrix, w: AttentionWeights,
                    ctr: FlopCounter | None = None) -> Matrix:
    """Queries from ``h``; keys and values from every HR token; no mask."""
    _check_input(h, w, "cross_attention")
    if f_hr.rows == 0:
        raise EmptyInputError("cross_attention: no high-resolution tokens")
    if f_hr.cols != w.width:
        raise ShapeError(f"HR token width {f_hr.cols} != weight width {w.width}")
    q = matmul(h, w.w_q, ctr)
    k, v = matmul(f_hr, w.w_k, ctr), matmul(f_hr, w.w_v, ctr)
    ctx, _ = _attend(q, k, v, w.heads, None, ctr)
    return matmul(ctx, w.w_o, ctr)


# --------------------------------------------------------------------------
# KV-cached decoding

@dataclass
class LayerCache:
    """Projected keys/values of one layer for a single generation stream."""

    keys: Matrix | None = None
    values: Matrix | None = None
    hr_keys: Matrix | None = None
    hr_values: Matrix | None = None
    hr_indices: np.ndarray | None = None
    cross_keys: Matrix | None = None
    cross_values: Matrix | None = None

    @property
    def length(self) -> int:
        return 0 if self.keys is None else self.keys.rows

    def append(self, k: Matrix, v: Matrix) -> None:
        if self.keys is None:
            self.keys, self.values = k, v
        else:
            self.keys, self.values = concat_rows(self.keys, k), concat_rows(self.values, v)


@dataclass
class KVCache:
    layers: list[LayerCache] = field(default_factory=list)

    @classmethod
    def empty(cls, n_layers: int) -> "KVCache":
        return cls([LayerCache() for _ in range(n_layers)])

    @property
    def length(self) -> int:
        return self.layers[0].length if self.layers else 0


def attention_step(cache: LayerCache, x: Matrix, w: AttentionWeights, kind: str = "self",
                   f_shr: Matrix | None = None, ctr: FlopCounter | None = None,
                   hr_indices: np.ndarray | None = None) -> tuple[Matrix, np.ndarray]:
    """Attend one new token (1 x D) against the cache, then append its key/value.

    ``kind`` is ``"self"`` or ``"flex"``.  For flex layers the HR part of
    the cache is rebuilt from ``f_shr`` on every call.  Returns the output
    row and the head-averaged map row over [cached tokens, new token, HR keys].
    """
    if x.rows != 1:
        raise ShapeError(f"attention_step takes one token, got {x.rows} rows")
    if x.cols != w.width:
        raise ShapeError(f"token width {x.cols} != weight width {w.width}")
    if kind == "self":
        if f_shr is not None:
            raise ConfigError("selected HR tokens given to a vanilla attention layer")
    elif kind == "flex":
        if not w.is_flex:
            raise ConfigError("flex step needs w_k_prime and w_v_prime")
        if f_shr is None:
            raise ConfigError("flex step needs the selected HR tokens")
    else:
        raise ConfigError(f"unknown layer kind {kind!r}")

    q = matmul(x, w.w_q, ctr)
    cache.append(matmul(x, w.w_k, ctr), matmul(x, w.w_v, ctr))
    k, v = cache.keys, cache.values
    if kind == "flex":
        cache.hr_keys = matmul(f_shr, w.w_k_prime, ctr)
        cache.hr_values = matmul(f_shr, w.w_v_prime, ctr)
        cache.hr_indices = None if hr_indices is None else np.asarray(hr_indices)
        k, v = concat_rows(k, cache.hr_keys), concat_rows(v, cache.hr_values)
    ctx, probs = _attend(q, k, v, w.heads, None, ctr)
    return matmul(ctx, w.w_o, ctr), probs.data.mean(axis=-3)[0]


def cross_attention_step(cache: LayerCache, x: Matrix, w: AttentionWeights,
                         f_hr: Matrix | None = None, ctr: FlopCounter | None = None) -> Matrix:
    """Cross-attention for one token; HR keys/values are projected once and cached."""
    if cache.cross_keys is None:
        if f_hr is None:
            raise ConfigError("cross-attention cache is empty and no HR tokens were given")
        cache.cross_keys, cache.cross_values = matmul(f_hr, w.w_k, ctr), matmul(f_hr, w.w_v, ctr)
    q = matmul(x, w.w_q, ctr)
    ctx, _ = _attend(q, cache.cross_keys, cache.cross_values, w.heads, None, ctr)
    return matmul(ctx, w.w_o, ctr)
