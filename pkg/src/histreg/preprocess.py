"""Intensity preprocessing: contrast stretch, inversion, Otsu tissue mask, denoising."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import to_gray
from .errors import DegenerateHistogram, DegenerateRange

__all__ = [
    "PreprocessConfig", "DARK_FOREGROUND", "BRIGHT_FOREGROUND",
    "nearest_rank", "contrast_stretch", "invert", "otsu_threshold",
    "otsu_mask", "gaussian_kernel", "denoise", "preprocess",
]

DARK_FOREGROUND = "darkForeground"
BRIGHT_FOREGROUND = "brightForeground"
HIST_BINS = 256


@dataclass(frozen=True)
class PreprocessConfig:
    stretch_low: float = 0.01
    stretch_high: float = 0.99
    denoise_sigma: float = 1.0
    mask_polarity: str = DARK_FOREGROUND

    def __post_init__(self):
        if not 0.0 <= self.stretch_low < self.stretch_high <= 1.0:
            raise ValueError("need 0 <= stretch_low < stretch_high <= 1")
        if self.denoise_sigma < 0:
            raise ValueError("denoise_sigma must be >= 0")
        if self.mask_polarity not in (DARK_FOREGROUND, BRIGHT_FOREGROUND):
            raise ValueError(f"unknown mask polarity {self.mask_polarity!r}")


def nearest_rank(values, p):
    """Nearest-rank percentile: the ``ceil(p * n)``-th smallest value (rank >= 1)."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    rank = max(1, math.ceil(p * v.size))
    return v[min(rank, v.size) - 1]


def contrast_stretch(img, cfg=PreprocessConfig()):
    """Per-channel linear stretch sending the low/high percentiles to 0/1."""
    img = np.asarray(img, dtype=np.float64)
    chans = img[..., None] if img.ndim == 2 else img
    out = np.empty_like(chans)
    for c in range(chans.shape[2]):
        ch = chans[..., c]
        lo = nearest_rank(ch, cfg.stretch_low)
        hi = nearest_rank(ch, cfg.stretch_high)
        if hi <= lo:
            raise DegenerateRange(f"channel {c} has a constant percentile range ({lo})")
        out[..., c] = np.clip((ch - lo) / (hi - lo), 0.0, 1.0)
    return out[..., 0] if img.ndim == 2 else out


def invert(img):
    return 1.0 - np.asarray(img, dtype=np.float64)


def _bin_index(gray):
    return np.minimum((gray * HIST_BINS).astype(np.intp), HIST_BINS - 1)


def otsu_threshold(img):
    """Return the Otsu split bin ``k``: class 0 is bins ``< k``, class 1 bins ``>= k``.

    The between-class variance is compared with exact integer arithmetic so
    ties resolve deterministically to the smallest ``k``.
    """
    bins = _bin_index(to_gray(img))
    hist = np.bincount(bins.ravel(), minlength=HIST_BINS)
    if np.count_nonzero(hist) < 2:
        raise DegenerateHistogram("all samples fall into a single histogram bin")
    counts = [int(c) for c in hist]
    n = sum(counts)
    total = sum(i * c for i, c in enumerate(counts))
    best_k, best_num, best_den = None, -1, 1
    n0 = s0 = 0
    for k in range(1, HIST_BINS):
        n0 += counts[k - 1]
        s0 += (k - 1) * counts[k - 1]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        # between-class variance * n^2 = (n s0 - n0 S)^2 / (n0 n1)
        num = (n * s0 - n0 * total) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return best_k


def otsu_mask(img, polarity=DARK_FOREGROUND):
    """Boolean tissue mask from Otsu's threshold on the 256-bin luma histogram.

    Foreground is ``bin < k`` for dark tissue and ``bin >= k`` for bright
    tissue, where the threshold value is ``k / 256``.
    """
    k = otsu_threshold(img)
    bins = _bin_index(to_gray(img))
    if polarity == DARK_FOREGROUND:
        return bins < k
    if polarity == BRIGHT_FOREGROUND:
        return bins >= k
    raise ValueError(f"unknown mask polarity {polarity!r}")


def gaussian_kernel(sigma):
    """Normalised 1-D Gaussian of radius ``ceil(3 sigma)``."""
    r = max(1, math.ceil(3 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def denoise(img, sigma=1.0):
    """Separable Gaussian smoothing with reflect padding; ``sigma=0`` is a no-op."""
    img = np.asarray(img, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    out = correlate1d(img, k, axis=0, mode="reflect")
    out = correlate1d(out, k, axis=1, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def preprocess(img, cfg=PreprocessConfig(), invert_image=False):
    """Contrast stretch, optional inversion, then denoising."""
    out = contrast_stretch(img, cfg)
    if invert_image:
        out = invert(out)
    return denoise(out, cfg.denoise_sigma)
