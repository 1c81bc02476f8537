import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from histreg.errors import DegenerateHistogram, DegenerateRange
from histreg.preprocess import (BRIGHT_FOREGROUND, DARK_FOREGROUND, PreprocessConfig,
                                contrast_stretch, denoise, gaussian_kernel, invert,
                                nearest_rank, otsu_mask, otsu_threshold, preprocess)


def brute_otsu(gray, polarity):
    """Exhaustive search over all 256 thresholds with plain float variance."""
    bins = np.minimum((gray * 256).astype(int), 255)
    best_t, best_v = None, -1.0
    for t in range(1, 256):
        fg, bg = bins[bins < t], bins[bins >= t]
        if fg.size == 0 or bg.size == 0:
            continue
        w0, w1 = fg.size / bins.size, bg.size / bins.size
        v = w0 * w1 * (fg.mean() - bg.mean()) ** 2
        if v > best_v * (1 + 1e-12):
            best_t, best_v = t, v
    return (bins < best_t) if polarity == DARK_FOREGROUND else (bins >= best_t)


def test_config_validation():
    with pytest.raises(ValueError):
        PreprocessConfig(stretch_low=0.5, stretch_high=0.5)
    with pytest.raises(ValueError):
        PreprocessConfig(denoise_sigma=-1)
    with pytest.raises(ValueError):
        PreprocessConfig(mask_polarity="sideways")


def test_nearest_rank():
    v = [15, 20, 35, 40, 50]
    assert nearest_rank(v, 0.05) == 15
    assert nearest_rank(v, 0.30) == 20
    assert nearest_rank(v, 0.40) == 20
    assert nearest_rank(v, 0.50) == 35
    assert nearest_rank(v, 1.0) == 50
    assert nearest_rank(v, 0.0) == 15


def test_stretch_exact_linear_map():
    img = np.array([[0.2, 0.4], [0.6, 0.8]])
    out = contrast_stretch(img, PreprocessConfig(0.0, 1.0))
    assert np.allclose(out, [[0, 1 / 3], [2 / 3, 1]], atol=1e-15)


def test_stretch_full_range_unchanged(rng):
    img = rng.random((10, 10))
    img.flat[0], img.flat[1] = 0.0, 1.0
    assert np.allclose(contrast_stretch(img, PreprocessConfig(0.0, 1.0)), img, atol=1e-15)


def test_stretch_clamped_fraction():
    img = np.random.default_rng(7).random(10000).reshape(100, 100)
    out = contrast_stretch(img)
    frac = np.mean((out == 0) | (out == 1))
    assert abs(frac - 0.02) <= 0.005


def test_stretch_constant_channel_raises():
    img = np.zeros((5, 5, 3))
    img[..., 0] = np.linspace(0, 1, 25).reshape(5, 5)
    with pytest.raises(DegenerateRange):
        contrast_stretch(img)


@given(arrays(np.float64, (12, 9), elements=st.floats(0, 1)),
       st.floats(0.0, 0.4), st.floats(0.6, 1.0))
def test_stretch_percentiles_hit_bounds(img, lo, hi):
    cfg = PreprocessConfig(lo, hi)
    a, b = nearest_rank(img, lo), nearest_rank(img, hi)
    if b <= a:
        with pytest.raises(DegenerateRange):
            contrast_stretch(img, cfg)
        return
    out = contrast_stretch(img, cfg)
    assert out.min() >= 0 and out.max() <= 1
    assert np.all(out[img == a] == 0) and np.all(out[img == b] == 1)


@given(arrays(np.int64, (6, 7, 3), elements=st.integers(0, 65536)))
def test_invert_involution_exact_on_dyadic_grid(k):
    img = k / 65536.0
    assert np.array_equal(invert(invert(img)), img)


@given(arrays(np.float64, (6, 7), elements=st.floats(0, 1)))
def test_invert_involution_within_one_ulp(img):
    assert np.all(np.abs(invert(invert(img)) - img) <= np.spacing(1.0))


def test_invert_examples():
    assert np.array_equal(invert(np.zeros((2, 2))), np.ones((2, 2)))
    assert invert(np.array([0.25]))[0] == 0.75


def test_otsu_two_level():
    img = np.full((10, 10), 0.1)
    img.flat[:40] = 0.9
    mask = otsu_mask(img, BRIGHT_FOREGROUND)
    assert np.array_equal(mask, img == 0.9)
    assert np.array_equal(mask, brute_otsu(img, BRIGHT_FOREGROUND))
    k = otsu_threshold(img)
    assert k == int(0.1 * 256) + 1    # the first boundary above 0.1 wins the tie


def test_otsu_dark_disk():
    ys, xs = np.mgrid[0:64, 0:64]
    disk = (xs - 32) ** 2 + (ys - 30) ** 2 < 15 ** 2
    img = np.where(disk, 0.2, 0.95)
    mask = otsu_mask(img, DARK_FOREGROUND)
    assert np.array_equal(mask, disk)
    assert np.array_equal(mask, brute_otsu(img, DARK_FOREGROUND))


def test_otsu_constant_raises():
    with pytest.raises(DegenerateHistogram):
        otsu_mask(np.full((8, 8), 0.4))


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([DARK_FOREGROUND, BRIGHT_FOREGROUND]))
def test_otsu_matches_brute_force(seed, polarity):
    r = np.random.default_rng(seed)
    img = np.clip(r.normal(r.uniform(0.2, 0.8), r.uniform(0.05, 0.3), (24, 24)), 0, 1)
    if r.random() < 0.3:
        img = np.round(img * 4) / 4          # few levels: exercises ties
    if len(np.unique(np.minimum((img * 256).astype(int), 255))) < 2:
        return
    assert np.array_equal(otsu_mask(img, polarity), brute_otsu(img, polarity))


def test_otsu_uses_rec709_luma():
    img = np.zeros((4, 4, 3))
    img[:2, :, 1] = 1.0     # green: luma 0.7152
    img[2:, :, 2] = 1.0     # blue: luma 0.0722
    assert np.array_equal(otsu_mask(img, BRIGHT_FOREGROUND)[:, 0], [1, 1, 0, 0])


def test_gaussian_kernel():
    k = gaussian_kernel(1.0)
    assert len(k) == 7 and abs(k.sum() - 1) < 1e-12
    assert len(gaussian_kernel(1.2)) == 2 * math.ceil(3.6) + 1


def test_denoise_examples(rng):
    img = rng.random((15, 15))
    assert np.array_equal(denoise(img, 0), img)
    assert np.allclose(denoise(np.full((9, 9), 0.37), 2.0), 0.37, atol=1e-9)
    imp = np.zeros((21, 21))
    imp[10, 10] = 1.0
    out = denoise(imp, 1.0)
    g = np.exp(-0.5 * np.arange(-3, 4) ** 2)
    g /= g.sum()
    assert out[10, 10] == pytest.approx(g[3] ** 2, rel=1e-12)


def test_denoise_preserves_mass(rng):
    img = np.full((30, 30), 0.5)
    img[10:20, 10:20] = rng.random((10, 10))
    assert abs(denoise(img, 1.5).sum() - img.sum()) <= 1e-6 * img.sum()


def test_denoise_rgb_per_channel(rng):
    img = rng.random((12, 12, 3))
    out = denoise(img, 1.0)
    for c in range(3):
        assert np.array_equal(out[..., c], denoise(img[..., c], 1.0))


def test_preprocess_order(rng):
    img = rng.random((16, 16))
    cfg = PreprocessConfig(denoise_sigma=1.0)
    assert np.array_equal(preprocess(img, cfg, True), denoise(invert(contrast_stretch(img, cfg)), 1.0))
    out = preprocess(img, cfg)
    assert out.min() >= 0 and out.max() <= 1
