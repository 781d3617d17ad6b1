import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flexattn.attention import AttentionMap
from flexattn.errors import ConfigError, ShapeError
from flexattn.selection import (
    PatchGrid,
    SelectionMask,
    SelectionStrategy,
    build_lr_mask,
    center_order,
    extract_image_attention,
    gather_tokens,
    select_lr_indices,
    topk_indices,
    upsample_indices,
    upsample_mask,
)
from flexattn.tensor import Matrix


def brute_topk(v, k):
    """Full sort by (-value, index): ties keep the lower index."""
    order = sorted(range(len(v)), key=lambda i: (-v[i], i))
    return sorted(order[:k])


def test_count_is_ceiling_of_ratio():
    s = SelectionStrategy(ratio=0.1)
    assert s.count(576) == 58
    assert s.count(16) == 2
    assert SelectionStrategy(ratio=0.25).count(16) == 4   # exact product, no float creep
    assert SelectionStrategy(ratio=0.0).count(16) == 0
    assert SelectionStrategy(ratio=1.0).count(16) == 16


def test_strategy_validation():
    with pytest.raises(ConfigError):
        SelectionStrategy(kind="median")
    with pytest.raises(ConfigError):
        SelectionStrategy(ratio=1.5)


def test_grid_for_count():
    assert PatchGrid.for_count(576).side == 24
    with pytest.raises(ConfigError):
        PatchGrid.for_count(10)


def test_topk_ties_prefer_lower_index():
    assert topk_indices(np.array([0.5, 0.5, 0.5, 0.1]), 2).tolist() == [0, 1]


def test_topk_against_brute_force_with_ties(rng):
    for _ in range(500):
        n = int(rng.integers(1, 20))
        v = rng.integers(0, 4, size=n).astype(float)
        k = int(rng.integers(0, n + 1))
        assert topk_indices(v, k).tolist() == brute_topk(list(v), k)


def test_attention_map_selection_picks_largest():
    grid = PatchGrid(3)
    attn = np.zeros(9)
    attn[[4, 7]] = [0.3, 0.2]
    got = select_lr_indices(attn, grid, SelectionStrategy(ratio=2 / 9))
    assert got.tolist() == [4, 7]


def test_selection_ignores_positive_scaling():
    grid = PatchGrid(4)
    v = np.random.default_rng(3).random(16)
    s = SelectionStrategy(ratio=0.25)
    assert np.array_equal(select_lr_indices(v, grid, s), select_lr_indices(v * 7.5, grid, s))


def test_center_order_starts_in_the_middle():
    assert sorted(center_order(4)[:4].tolist()) == [5, 6, 9, 10]
    assert center_order(3)[0] == 4


def test_center_and_random_strategies():
    grid = PatchGrid(4)
    attn = np.random.default_rng(0).random(16)
    c = select_lr_indices(attn, grid, SelectionStrategy("center", 0.25))
    assert c.tolist() == [5, 6, 9, 10]
    r1 = select_lr_indices(attn, grid, SelectionStrategy("random", 0.25, seed=7))
    r2 = select_lr_indices(attn, grid, SelectionStrategy("random", 0.25, seed=7))
    assert np.array_equal(r1, r2) and len(set(r1.tolist())) == 4


def test_batched_selection_shape():
    grid = PatchGrid(2)
    attn = np.array([[0.1, 0.9, 0.0, 0.0], [0.0, 0.0, 0.2, 0.8]])
    got = select_lr_indices(attn, grid, SelectionStrategy(ratio=0.25))
    assert got.tolist() == [[1], [3]]


def test_extract_uses_last_row():
    vals = np.array([[1.0, 0.0, 0.0], [0.2, 0.3, 0.5]])
    amap = AttentionMap(Matrix(vals))
    assert extract_image_attention(amap, 2).tolist() == [0.2, 0.3]
    with pytest.raises(ShapeError):
        extract_image_attention(amap, 4)


def test_upsample_block_lift():
    # LR patch (0, 1) on a 2x2 grid, factor 2 -> HR patches (0,2),(0,3),(1,2),(1,3) on 4x4
    assert upsample_indices(np.array([1]), 2, 2).tolist() == [2, 3, 6, 7]
    assert upsample_indices(np.array([0, 3]), 2, 1).tolist() == [0, 3]


def test_upsample_mask_ratio_preserved():
    m = SelectionMask.from_indices(PatchGrid(24), np.arange(58))
    hr = upsample_mask(m, 3)
    assert hr.grid.side == 72 and len(hr.indices) == 522
    assert hr.ratio == pytest.approx(m.ratio)


def test_mask_grid_view():
    m = build_lr_mask(np.array([0.0, 1.0, 0.0, 0.0]), PatchGrid(2), SelectionStrategy(ratio=0.25))
    assert m.as_grid().tolist() == [[0, 1], [0, 0]]


def test_mask_rejects_out_of_range():
    with pytest.raises(ShapeError):
        SelectionMask.from_indices(PatchGrid(2), [4])


def test_gather_tokens_ascending():
    f = Matrix(np.arange(32.0).reshape(16, 2))
    mask = SelectionMask.from_indices(PatchGrid(4), [9, 2])
    toks, idx = gather_tokens(f, mask)
    assert idx.tolist() == [2, 9]
    assert toks.data[:, 0].tolist() == [4.0, 18.0]


def test_gather_tokens_grid_mismatch():
    with pytest.raises(ShapeError):
        gather_tokens(Matrix(np.ones((8, 2))), SelectionMask.from_indices(PatchGrid(2), [0]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.floats(0, 1))
def test_upsampled_count_and_range(side, factor, ratio):
    grid = PatchGrid(side)
    attn = np.random.default_rng(side * 7 + factor).random(side * side)
    lr = select_lr_indices(attn, grid, SelectionStrategy(ratio=ratio))
    hr = upsample_indices(lr, side, factor)
    k = SelectionStrategy(ratio=ratio).count(side * side)
    assert len(lr) == k and len(hr) == k * factor * factor
    assert len(set(hr.tolist())) == len(hr)
    assert hr.size == 0 or (hr.min() >= 0 and hr.max() < (side * factor) ** 2)
    # every HR index maps back to a selected LR patch
    r, c = np.divmod(hr, side * factor)
    back = (r // factor) * side + c // factor
    assert set(back.tolist()) == set(lr.tolist())


def test_llava_scale_ratio():
    lr = np.arange(SelectionStrategy(ratio=0.1).count(576))
    m = len(upsample_indices(lr, 24, 3))
    assert m == 522 and math.isclose(m / 5184, 522 / 5184)
