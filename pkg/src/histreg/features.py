"""Multi-scale segment-test keypoints, 512-bit binary descriptors and
Hamming matching with ratio test and cross-check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter

from .core import _bilinear, rescale, to_gray

__all__ = ["Keypoint", "detect_keypoints", "describe", "match", "hamming",
           "segment_test", "PATTERN_RADIUS", "DESCRIPTOR_BITS", "MatchSet"]

DESCRIPTOR_BITS = 512
N_OCTAVES = 4
ARC = 9

# Bresenham circle of radius 3, clockwise from 12 o'clock
CIRCLE = np.array([(0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
                   (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3)])


def _build_pattern():
    radii = [0.0, 2.9, 4.9, 7.4, 10.8]
    counts = [1, 10, 14, 15, 20]
    pts, sig = [], []
    for ring, (r, n) in enumerate(zip(radii, counts)):
        spacing = 2 * math.pi * r / n if r > 0 else 1.8
        for k in range(n):
            a = 2 * math.pi * k / n + (math.pi / n if ring % 2 else 0.0)
            pts.append((r * math.cos(a), r * math.sin(a)))
            sig.append(0.5 * spacing)
    pts = np.array(pts)
    pairs = []
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            pairs.append((float(np.hypot(*(pts[i] - pts[j]))), i, j))
    pairs.sort()
    sel = np.array([(i, j) for _, i, j in pairs[:DESCRIPTOR_BITS]])
    return pts, np.round(np.array(sig), 3), sel


PATTERN, PATTERN_SIGMA, PATTERN_PAIRS = _build_pattern()
PATTERN_RADIUS = float(np.hypot(*PATTERN.T).max() + 3 * PATTERN_SIGMA.max() + 1)
ORIENT_RADIUS = 10


@dataclass(frozen=True)
class Keypoint:
    """Detected corner; ``x, y`` in full-image pixels, ``octave`` the pyramid level."""

    x: float
    y: float
    scale: float
    orientation: float
    score: float
    octave: int = 0


@dataclass(eq=False)
class MatchSet:
    """Point correspondences: ``moving[i]`` pairs with ``reference[i]``."""

    moving: np.ndarray
    reference: np.ndarray
    distance: np.ndarray

    def __post_init__(self):
        self.moving = np.asarray(self.moving, dtype=np.float64).reshape(-1, 2)
        self.reference = np.asarray(self.reference, dtype=np.float64).reshape(-1, 2)
        self.distance = np.asarray(self.distance, dtype=np.float64).reshape(-1)
        if not (len(self.moving) == len(self.reference) == len(self.distance)):
            raise ValueError("MatchSet arrays must have equal length")

    def __len__(self):
        return len(self.moving)

    def subset(self, idx):
        return MatchSet(self.moving[idx], self.reference[idx], self.distance[idx])

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))


def segment_test(gray, threshold, arc=ARC):
    """Segment-test corner score map (0 where the test fails).

    A pixel is a corner when ``arc`` contiguous circle pixels are all brighter
    than ``centre + threshold`` or all darker than ``centre - threshold``.
    The score is the larger of the summed bright/dark excesses over the
    threshold.
    """
    g = np.asarray(gray, dtype=np.float64)
    h, w = g.shape
    if h < 7 or w < 7:
        return np.zeros_like(g)
    c = g[3:h - 3, 3:w - 3]
    ring = np.stack([g[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] for dx, dy in CIRCLE])
    diff = ring - c
    bright = diff > threshold
    dark = diff < -threshold

    def has_arc(b):
        ext = np.concatenate([b, b[:arc - 1]])
        run = np.zeros(b.shape[1:], dtype=bool)
        for s in range(16):
            run |= np.all(ext[s:s + arc], axis=0)
        return run

    ok_b = has_arc(bright)
    ok_d = has_arc(dark)
    sb = np.where(bright, diff - threshold, 0.0).sum(0)
    sd = np.where(dark, -diff - threshold, 0.0).sum(0)
    score = np.where(ok_b | ok_d, np.maximum(np.where(ok_b, sb, 0), np.where(ok_d, sd, 0)), 0.0)
    out = np.zeros_like(g)
    out[3:h - 3, 3:w - 3] = score
    return out


def _pyramid(gray, n):
    levels = [gray]
    for _ in range(n - 1):
        levels.append(rescale(levels[-1], 0.5))
    return levels


def _orientation(img, xs, ys, radius=ORIENT_RADIUS):
    """Intensity-centroid angle of mean-removed patches around integer points."""
    h, w = img.shape
    off = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(off, off, indexing="ij")
    disk = (dx ** 2 + dy ** 2) <= radius ** 2
    dx, dy = dx[disk], dy[disk]
    px = np.clip(xs[:, None] + dx[None], 0, w - 1)
    py = np.clip(ys[:, None] + dy[None], 0, h - 1)
    v = img[py, px]
    v = v - v.mean(axis=1, keepdims=True)
    return np.arctan2((v * dy).sum(1), (v * dx).sum(1))


def detect_keypoints(img, max_count=5000, threshold=0.04, octaves=N_OCTAVES):
    """Segment-test corners over a ``octaves``-level dyadic pyramid.

    Non-maximum suppression (3x3) runs per octave; the strongest
    ``max_count`` survive, ordered by score (desc), then ``y``, then ``x``.
    """
    gray = to_gray(img)
    levels = _pyramid(gray, octaves)
    found = []
    for o, lev in enumerate(levels):
        if min(lev.shape) < 2 * ORIENT_RADIUS + 8:
            break
        s = segment_test(lev, threshold)
        peak = (s > 0) & (s == maximum_filter(s, size=3, mode="constant"))
        ys, xs = np.nonzero(peak)
        if len(xs) == 0:
            continue
        # a plateau of equal maxima keeps only its first pixel in raster order
        order = np.lexsort((xs, ys))
        xs, ys = xs[order], ys[order]
        taken = np.zeros(lev.shape, dtype=bool)
        keep = []
        for i, (x, y) in enumerate(zip(xs, ys)):
            if taken[max(0, y - 1):y + 2, max(0, x - 1):x + 2].any():
                continue
            taken[y, x] = True
            keep.append(i)
        xs, ys = xs[keep], ys[keep]
        ang = _orientation(gaussian_filter(lev, 1.0), xs, ys)
        f = 2.0 ** o
        for x, y, a, sc in zip(xs, ys, ang, s[ys, xs]):
            found.append(Keypoint((x + 0.5) * f - 0.5, (y + 0.5) * f - 0.5, f,
                                  float(a), float(sc), o))
    found.sort(key=lambda k: (-k.score, k.y, k.x))
    return found[:max_count]


def describe(img, keypoints, upright=False):
    """512-bit descriptors from smoothed-intensity comparisons on a ring pattern.

    Returns ``(kept_keypoints, bits)`` where ``bits`` is an ``(N, 512)`` bool
    array.  Keypoints too close to the border for the pattern are dropped.
    """
    gray = to_gray(img)
    levels = _pyramid(gray, max([k.octave for k in keypoints], default=0) + 1)
    sigmas = np.unique(PATTERN_SIGMA)
    kept, rows = [], []
    by_octave = {}
    for k in keypoints:
        by_octave.setdefault(k.octave, []).append(k)
    index = {id(k): i for i, k in enumerate(keypoints)}
    out = [None] * len(keypoints)
    for o, kps in by_octave.items():
        lev = levels[o]
        h, w = lev.shape
        smooth = {s: gaussian_filter(lev, s, mode="nearest") for s in sigmas}
        f = 2.0 ** o
        x = np.array([(k.x + 0.5) / f - 0.5 for k in kps])
        y = np.array([(k.y + 0.5) / f - 0.5 for k in kps])
        ok = (x >= PATTERN_RADIUS) & (x <= w - 1 - PATTERN_RADIUS) \
            & (y >= PATTERN_RADIUS) & (y <= h - 1 - PATTERN_RADIUS)
        if not ok.any():
            continue
        x, y = x[ok], y[ok]
        kk = [k for k, g in zip(kps, ok) if g]
        th = np.zeros(len(kk)) if upright else np.array([k.orientation for k in kk])
        c, s_ = np.cos(th)[:, None], np.sin(th)[:, None]
        px = x[:, None] + c * PATTERN[:, 0] - s_ * PATTERN[:, 1]
        py = y[:, None] + s_ * PATTERN[:, 0] + c * PATTERN[:, 1]
        vals = np.empty(px.shape)
        for sg in sigmas:
            cols = PATTERN_SIGMA == sg
            vals[:, cols] = _bilinear(smooth[sg], px[:, cols], py[:, cols])
        bits = vals[:, PATTERN_PAIRS[:, 1]] > vals[:, PATTERN_PAIRS[:, 0]]
        for k, b in zip(kk, bits):
            out[index[id(k)]] = (k, b)
    for item in out:
        if item is not None:
            kept.append(item[0])
            rows.append(item[1])
    bits = np.array(rows, dtype=bool).reshape(-1, DESCRIPTOR_BITS)
    return kept, bits


def hamming(a, b):
    """Pairwise Hamming distances between two bool descriptor arrays."""
    a = np.asarray(a, dtype=bool).reshape(-1, DESCRIPTOR_BITS)
    b = np.asarray(b, dtype=bool).reshape(-1, DESCRIPTOR_BITS)
    sa = np.where(a, 1.0, -1.0).astype(np.float32)
    sb = np.where(b, 1.0, -1.0).astype(np.float32)
    dot = sa @ sb.T
    return np.rint((DESCRIPTOR_BITS - dot) / 2).astype(np.int32)


def match(desc_a, desc_b, ratio=0.8):
    """Ratio-tested, cross-checked nearest neighbours.

    Returns ``(ia, ib, dist)`` index/distance arrays; empty when either side
    is empty.
    """
    desc_a = np.asarray(desc_a, dtype=bool).reshape(-1, DESCRIPTOR_BITS)
    desc_b = np.asarray(desc_b, dtype=bool).reshape(-1, DESCRIPTOR_BITS)
    empty = (np.zeros(0, np.intp), np.zeros(0, np.intp), np.zeros(0))
    if len(desc_a) == 0 or len(desc_b) == 0:
        return empty
    d = hamming(desc_a, desc_b)
    best = np.argmin(d, axis=1)
    rows = np.arange(len(d))
    d1 = d[rows, best]
    if d.shape[1] > 1:
        d2 = np.partition(d, 1, axis=1)[:, 1]
    else:
        d2 = np.full(len(d), DESCRIPTOR_BITS + 1)
    back = np.argmin(d, axis=0)
    mutual = back[best] == rows
    # identical descriptors (distance 0 to both neighbours) are accepted
    good = mutual & ((d1 < ratio * d2) | (d1 == 0))
    ia = rows[good]
    return ia, best[good], d1[good].astype(np.float64)
