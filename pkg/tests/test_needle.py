import numpy as np
import pytest
from scipy.stats import chisquare

from flexattn.bench import needle
from flexattn.errors import ConfigError
from flexattn.model import Image, downsample


def test_glyphs_share_one_pixel_multiset():
    flat = needle.GLYPHS.reshape(needle.N_CLASSES, -1)
    assert all(sorted(g) == sorted(flat[0]) for g in flat)
    assert len({g.tobytes() for g in flat}) == needle.N_CLASSES


def test_same_seed_same_bytes():
    a, b = needle.gen_needle(3, 5), needle.gen_needle(3, 5)
    for x, y in zip(a, b):
        assert x.image.pixels.tobytes() == y.image.pixels.tobytes()
        assert (x.prompt_ids, x.label_id) == (y.prompt_ids, y.label_id)


def test_glyph_swap_invisible_after_downsampling():
    t = needle.make_task(0, 0)
    noise = t.image.pixels[:, :, 0].copy()
    noise[t.glyph_patch[0] * 4:(t.glyph_patch[0] + 1) * 4, t.glyph_patch[1] * 4:(t.glyph_patch[1] + 1) * 4] = 0
    lows = set()
    for g in range(needle.N_CLASSES):
        img = Image(needle.render(noise, g, t.glyph_patch)[:, :, None])
        lows.add(downsample(img, needle.LR_FACTOR).pixels.tobytes())
    assert len(lows) == 1


def test_single_glyph_inside_named_cell():
    for t in needle.gen_needle(7, 50):
        px = t.image.pixels[:, :, 0]
        assert px.max() == 1.0 and np.all((px == 1.0).sum() == 8)
        r, c = np.argwhere(px == 1.0).min(axis=0)
        assert (r // needle.CELL_H, c // needle.CELL_W) == t.target_cell
        assert t.prompt_ids == (t.cell_index, needle.QUERY_ID)
        assert t.label_id == needle.CLASS_BASE + t.glyph_class


def test_noise_is_dyadic_and_faint():
    px = needle.make_task(1, 2).image.pixels
    noise = px[px < 1.0]
    assert noise.max() <= 0.1875 and np.all(noise * 64 == np.round(noise * 64))


def test_class_histogram_is_uniform():
    classes = [t.glyph_class for t in needle.gen_needle(11, 8000)]
    counts = np.bincount(classes, minlength=8)
    assert chisquare(counts).pvalue > 0.001


def test_class_pool_restriction():
    assert {t.glyph_class for t in needle.gen_needle(0, 40, classes=[5])} == {5}


def test_count_must_be_positive():
    with pytest.raises(ConfigError):
        needle.gen_needle(0, 0)


def test_resample_commutes_with_pooling():
    t = needle.make_task(2, 3)
    lr_direct = downsample(t.image, 4).pixels
    for side, f in ((32, 2), (48, 3), (64, 4)):
        assert np.allclose(downsample(needle.resample(t.image, side), f).pixels, lr_direct, atol=1e-15)


def test_target_block_contains_glyph_patch():
    t = needle.make_task(0, 9)
    blk = needle.target_block(t, 4)
    assert t.glyph_patch[0] * 16 + t.glyph_patch[1] in blk
    assert len(blk) % 16 == 0 and 4 * 16 <= len(blk) <= 9 * 16


def test_stack_shapes():
    img, prompts, labels = needle.stack(needle.gen_needle(0, 3), 48)
    assert img.pixels.shape == (3, 48, 48, 1) and prompts.shape == (3, 2) and labels.shape == (3,)
