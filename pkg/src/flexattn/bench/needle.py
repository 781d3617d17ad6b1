"""Synthetic needle-VQA task.

A 64 px grayscale image carries one 4x4 binary glyph hidden in faint noise.
The prompt names the cell that holds it; the answer is the glyph class.
Every glyph has eight lit pixels, so a 4x area-average turns each one into
the same grey value and the class survives only at full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..model import Image, downsample

IMAGE_SIDE = 64
PATCH = 4
LR_FACTOR = 4
CELL_ROWS, CELL_COLS = 2, 4
CELL_H, CELL_W = IMAGE_SIDE // CELL_ROWS, IMAGE_SIDE // CELL_COLS   # 32 x 16 px
N_CELLS = CELL_ROWS * CELL_COLS
N_CLASSES = 8

# token ids: 0..7 cell names, 8 the question token, 9..16 glyph classes
QUERY_ID = N_CELLS
CLASS_BASE = N_CELLS + 1
VOCAB = CLASS_BASE + N_CLASSES

# noise levels are multiples of 1/64 so area means stay exact in binary
NOISE_LEVELS = np.arange(13) / 64.0

# eight 4x4 patterns, each with exactly eight lit pixels
GLYPHS = np.array([
    [[1, 1, 1, 1], [1, 0, 0, 1], [1, 0, 0, 1], [0, 0, 0, 0]],
    [[1, 1, 1, 1], [1, 1, 1, 1], [0, 0, 0, 0], [0, 0, 0, 0]],
    [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 0, 0]],
    [[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1]],
    [[1, 0, 0, 1], [0, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]],
    [[0, 1, 1, 0], [1, 1, 1, 1], [0, 1, 1, 0], [0, 0, 0, 0]],
    [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]],
    [[0, 0, 0, 1], [0, 0, 1, 1], [0, 1, 1, 1], [0, 0, 1, 1]],
], dtype=np.float64)


@dataclass(frozen=True)
class NeedleTask:
    image: Image
    target_cell: tuple[int, int]
    glyph_class: int
    glyph_patch: tuple[int, int]     # HR patch (row, col) holding the glyph
    prompt_ids: tuple[int, ...]
    label_id: int

    @property
    def cell_index(self) -> int:
        return self.target_cell[0] * CELL_COLS + self.target_cell[1]


def render(noise: np.ndarray, glyph_class: int, patch_rc: tuple[int, int]) -> np.ndarray:
    px = noise.copy()
    r, c = patch_rc[0] * PATCH, patch_rc[1] * PATCH
    px[r:r + PATCH, c:c + PATCH] = GLYPHS[glyph_class]
    return px


def make_task(seed: int, index: int, classes=None) -> NeedleTask:
    """Task ``index`` of stream ``seed``; each (seed, index) pair has its own generator."""
    rng = np.random.default_rng([seed, index])
    pool = np.arange(N_CLASSES) if classes is None else np.asarray(classes)
    cell = int(rng.integers(N_CELLS))
    glyph = int(pool[rng.integers(len(pool))])
    cr, cc = divmod(cell, CELL_COLS)
    # glyph sits on one HR patch inside the cell (cells are 8 x 4 HR patches)
    pr = cr * (CELL_H // PATCH) + int(rng.integers(CELL_H // PATCH))
    pc = cc * (CELL_W // PATCH) + int(rng.integers(CELL_W // PATCH))
    noise = rng.choice(NOISE_LEVELS, size=(IMAGE_SIDE, IMAGE_SIDE))
    px = render(noise, glyph, (pr, pc))
    return NeedleTask(Image(px[:, :, None]), (cr, cc), glyph, (pr, pc),
                      (cell, QUERY_ID), CLASS_BASE + glyph)


def gen_needle(seed: int, count: int, start: int = 0, classes=None) -> list[NeedleTask]:
    if count < 1:
        raise ConfigError("count must be >= 1")
    return [make_task(seed, start + i, classes) for i in range(count)]


def stack(tasks, side: int = IMAGE_SIDE) -> tuple[Image, np.ndarray, np.ndarray]:
    """Batch tensors: images (B, side, side, 1), prompts (B, 2), labels (B,)."""
    pixels = np.stack([t.image.pixels for t in tasks])
    pixels = resample(Image(pixels), side).pixels
    prompts = np.array([t.prompt_ids for t in tasks], dtype=np.int64)
    labels = np.array([t.label_id for t in tasks], dtype=np.int64)
    return Image(pixels), prompts, labels


def lr_view(task: NeedleTask) -> np.ndarray:
    return downsample(task.image, LR_FACTOR).pixels


LR_SIDE = IMAGE_SIDE // LR_FACTOR           # 16 px, a 4 x 4 LR patch grid
LR_GRID = LR_SIDE // PATCH


def area_matrix(src: int, dst: int) -> np.ndarray:
    """(dst x src) operator averaging each output pixel over its footprint in the source."""
    a = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = i * src / dst, (i + 1) * src / dst
        for j in range(int(np.floor(lo)), int(np.ceil(hi))):
            a[i, j] = min(hi, j + 1) - max(lo, j)
    return a * dst / src


def resample(img: Image, side: int) -> Image:
    """Area resampling of the native 64 px scene to ``side`` px (identity at 64)."""
    if side == img.side:
        return img
    a = area_matrix(img.side, side)
    px = np.einsum("ij,...jkc,lk->...ilc", a, img.pixels, a)
    return Image(px)


def target_block(task: NeedleTask, factor: int = LR_FACTOR) -> set[int]:
    """HR patch indices of the 3x3 LR-patch neighbourhood around the glyph's LR patch.

    ``factor`` is the HR/LR ratio of the model input: the HR grid is
    ``LR_GRID * factor`` patches wide.
    """
    lr_side = LR_GRID
    hr_side = lr_side * factor
    lr_r, lr_c = task.glyph_patch[0] // LR_FACTOR, task.glyph_patch[1] // LR_FACTOR
    out = set()
    for r in range(max(0, lr_r - 1), min(lr_side, lr_r + 2)):
        for c in range(max(0, lr_c - 1), min(lr_side, lr_c + 2)):
            for a in range(factor):
                for b in range(factor):
                    out.add((r * factor + a) * hr_side + c * factor + b)
    return out
