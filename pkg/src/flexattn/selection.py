"""High-resolution token selection.

The last token's attention over the low-resolution image tokens is turned
into a binary patch mask (top-k by default), block-replicated onto the
high-resolution patch grid, and used to gather the selected HR tokens.
Random and center strategies exist as ablation baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Matrix, gather_rows

STRATEGIES = ("attention_map", "random", "center")


@dataclass(frozen=True)
class PatchGrid:
    side: int

    def __post_init__(self):
        if self.side < 0:
            raise ConfigError(f"grid side must be non-negative, got {self.side}")

    @property
    def patch_count(self) -> int:
        return self.side * self.side

    @classmethod
    def for_count(cls, n: int) -> "PatchGrid":
        side = math.isqrt(n)
        if side * side != n:
            raise ConfigError(f"{n} image tokens do not form a square grid")
        return cls(side)


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "attention_map"
    ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown selection strategy {self.kind!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"selection ratio must lie in [0, 1], got {self.ratio}")

    def count(self, n: int) -> int:
        """Number of LR patches selected out of ``n``: ceil(ratio * n)."""
        return min(n, math.ceil(round(self.ratio * n, 9)))


@dataclass(frozen=True)
class SelectionMask:
    grid: PatchGrid
    bits: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_indices(cls, grid: PatchGrid, indices) -> "SelectionMask":
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= grid.patch_count):
            raise ShapeError(f"selection index out of range for {grid.side}x{grid.side} grid")
        bits = np.zeros(grid.patch_count, dtype=np.uint8)
        bits[idx] = 1
        return cls(grid, bits, idx)

    @property
    def ratio(self) -> float:
        return len(self.indices) / self.grid.patch_count if self.grid.patch_count else 0.0

    def as_grid(self) -> np.ndarray:
        return self.bits.reshape(self.grid.side, self.grid.side)


def extract_image_attention(attn, n_i: int) -> np.ndarray:
    """Attention of the last query over the first ``n_i`` (image) keys.

    Accepts an :class:`AttentionMap`, a (..., N, L) array of maps, or a
    single decode-time map row of shape (L,).
    """
    values = attn.numpy() if hasattr(attn, "numpy") else np.asarray(attn)
    row = values if values.ndim == 1 else values[..., -1, :]
    if values.ndim > 1 and n_i > values.shape[-2]:
        raise ShapeError(f"n_i={n_i} exceeds sequence length {values.shape[-2]}")
    if n_i > row.shape[-1]:
        raise ShapeError(f"n_i={n_i} exceeds map width {row.shape[-1]}")
    return np.array(row[..., :n_i])


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Ascending indices of the k largest entries per row; ties go to the lower index."""
    scores = np.asarray(scores)
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def center_order(side: int) -> np.ndarray:
    """Flat patch indices sorted by distance of the patch center to the grid center."""
    r, c = np.divmod(np.arange(side * side), side)
    # doubled coordinates keep the arithmetic in exact integers
    d2 = (2 * r + 1 - side) ** 2 + (2 * c + 1 - side) ** 2
    return np.argsort(d2, kind="stable")


def select_lr_indices(attn: np.ndarray, grid: PatchGrid, strategy: SelectionStrategy,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Chosen LR patch indices for each attention vector in ``attn`` (shape (..., n_i)).

    The result has shape (..., k) with k = ``strategy.count(n_i)``, each row ascending.
    """
    attn = np.asarray(attn, dtype=np.float64)
    n = attn.shape[-1]
    if n != grid.patch_count:
        raise ConfigError(f"{n} attention values do not match a {grid.side}x{grid.side} grid")
    k = strategy.count(n)
    lead = attn.shape[:-1]
    if strategy.kind == "attention_map":
        total = attn.sum(axis=-1, keepdims=True)
        normed = np.divide(attn, total, out=attn.copy(), where=total > 0)
        return topk_indices(normed, k)
    if strategy.kind == "center":
        chosen = np.sort(center_order(grid.side)[:k])
        return np.broadcast_to(chosen, lead + (k,)).copy()
    if rng is None:
        rng = np.random.default_rng(strategy.seed)
    rows = int(np.prod(lead, dtype=np.int64))
    picks = [np.sort(rng.permutation(n)[:k]) for _ in range(rows)]
    return np.array(picks, dtype=np.int64).reshape(lead + (k,))


def build_lr_mask(attn, grid: PatchGrid, strategy: SelectionStrategy,
                  rng: np.random.Generator | None = None) -> SelectionMask:
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 1:
        raise ShapeError(f"build_lr_mask takes one attention vector, got shape {attn.shape}")
    PatchGrid.for_count(attn.shape[0])
    return SelectionMask.from_indices(grid, select_lr_indices(attn, grid, strategy, rng))


def upsample_indices(lr_indices: np.ndarray, lr_side: int, factor: int) -> np.ndarray:
    """Nearest-neighbour lift of LR patch indices to ascending HR patch indices."""
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    lr_indices = np.asarray(lr_indices, dtype=np.int64)
    r, c = np.divmod(lr_indices, lr_side)
    a, b = np.divmod(np.arange(factor * factor), factor)
    hr_side = lr_side * factor
    hr = (r[..., None] * factor + a) * hr_side + (c[..., None] * factor + b)
    return np.sort(hr.reshape(lr_indices.shape[:-1] + (-1,)), axis=-1)


def upsample_mask(lr_mask: SelectionMask, factor: int) -> SelectionMask:
    hr_grid = PatchGrid(lr_mask.grid.side * factor)
    return SelectionMask.from_indices(
        hr_grid, upsample_indices(lr_mask.indices[None], lr_mask.grid.side, factor)[0])


def gather_tokens(f_hr: Matrix, hr_mask: SelectionMask,
                  decided_by: Matrix | None = None) -> tuple[Matrix, np.ndarray]:
    """Rows of ``f_hr`` at the mask's indices, in ascending index order."""
    if hr_mask.grid.patch_count != f_hr.rows:
        raise ShapeError(f"mask covers {hr_mask.grid.patch_count} patches, f_hr has {f_hr.rows} rows")
    idx = hr_mask.indices
    return gather_rows(f_hr, np.broadcast_to(idx, f_hr.shape[:-2] + idx.shape), decided_by), idx
