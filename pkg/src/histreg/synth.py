"""Seeded synthetic histology pairs with exact geometric ground truth.

The reference is a Beer-Lambert rendering of two stain concentration maps
(nuclei-like hematoxylin blobs on an eosin tissue body with lumen holes).
The moving image shows the same tissue sampled through a known warp
(affine followed by a sinusoidal displacement) and, optionally, rendered
with a different appearance: channel remixing plus intensity inversion,
mimicking bright-tissue-on-dark-background multimodal microscopy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .core import AffineTransform2D, SinusoidalWarp, save_image, save_transform
from .evaluation import LandmarkPair, write_landmarks
from .tiles import write_tiles

__all__ = ["H_VECTOR", "E_VECTOR", "DEFAULT_STAINS", "SynthSpec", "SynthPair",
           "generate_pair", "random_affine", "render_stains", "write_pair"]

H_VECTOR = np.array([0.651, 0.701, 0.290]) / np.linalg.norm([0.651, 0.701, 0.290])
E_VECTOR = np.array([0.070, 0.990, 0.110]) / np.linalg.norm([0.070, 0.990, 0.110])
DEFAULT_STAINS = np.stack([H_VECTOR, E_VECTOR], axis=1)

# row-stochastic channel remix for the second modality
REMIX = np.array([[0.6, 0.3, 0.1],
                  [0.2, 0.6, 0.2],
                  [0.1, 0.3, 0.6]])


@dataclass(frozen=True, eq=False)
class SynthSpec:
    seed: int = 0
    width: int = 512
    height: int = 384
    stain_matrix: np.ndarray = field(default_factory=lambda: DEFAULT_STAINS.copy())
    blob_count: int | None = None
    affine: AffineTransform2D = field(default_factory=AffineTransform2D)
    deform_amplitude: float = 0.0
    deform_scale: float = 200.0
    noise_sigma: float = 0.01
    landmark_count: int = 10
    modality_gap: bool = True

    def __post_init__(self):
        if self.deform_amplitude < 0 or self.noise_sigma < 0:
            raise ValueError("deform_amplitude and noise_sigma must be >= 0")
        if self.landmark_count < 1:
            raise ValueError("landmark_count must be >= 1")


@dataclass(eq=False)
class SynthPair:
    moving: np.ndarray
    reference: np.ndarray
    truth: SinusoidalWarp
    landmarks: list
    reference_concentrations: np.ndarray
    tissue: np.ndarray
    translated: np.ndarray | None = None

    @property
    def moving_points(self):
        return np.array([lm.moving for lm in self.landmarks], dtype=np.float64)

    @property
    def reference_points(self):
        return np.array([lm.reference for lm in self.landmarks], dtype=np.float64)


def random_affine(rng, max_rotation=5.0, max_shift=20.0, scale_range=(0.95, 1.05),
                  center=(0.0, 0.0)):
    """Random similarity-plus-shear affine about ``center``."""
    th = math.radians(rng.uniform(-max_rotation, max_rotation))
    s = rng.uniform(*scale_range)
    shear = rng.uniform(-0.02, 0.02)
    m = s * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    m = m @ np.array([[1.0, shear], [0.0, 1.0]])
    c = np.asarray(center, dtype=np.float64)
    t = c - m @ c + rng.uniform(-max_shift, max_shift, size=2)
    return AffineTransform2D(m[0, 0], m[0, 1], m[1, 0], m[1, 1], t[0], t[1])


def _tissue_field(rng, w, h):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = w / 2 + rng.uniform(-0.03, 0.03) * w, h / 2 + rng.uniform(-0.03, 0.03) * h
    rx, ry = 0.40 * w, 0.40 * h
    dx, dy = (xs - cx) / rx, (ys - cy) / ry
    rho = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    edge = np.ones_like(theta)
    for k in (2, 3, 5):
        edge += rng.uniform(0.02, 0.06) * np.sin(k * theta + rng.uniform(0, 2 * np.pi))
    # logistic edge about 3 px wide
    return 1.0 / (1.0 + np.exp(-(edge - rho) * min(rx, ry) / 3.0))


def _smooth_noise(rng, w, h, n=6, lo=40.0, hi=160.0):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    f = np.zeros((h, w))
    for _ in range(n):
        lam = rng.uniform(lo, hi)
        ang = rng.uniform(0, np.pi)
        f += np.sin(2 * np.pi * (xs * np.cos(ang) + ys * np.sin(ang)) / lam + rng.uniform(0, 2 * np.pi))
    return f / np.sqrt(n / 2.0)


def _splat(canvas, rng, centers, sigmas, amps):
    h, w = canvas.shape
    for (cx, cy), s, a in zip(centers, sigmas, amps):
        r = int(math.ceil(3 * s))
        x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 2)
        y0, x1y = max(0, int(cy) - r), min(h, int(cy) + r + 2)
        if x0 >= x1 or y0 >= x1y:
            continue
        yy, xx = np.mgrid[y0:x1y, x0:x1]
        canvas[y0:x1y, x0:x1] += a * np.exp(-0.5 * ((xx - cx) ** 2 + (yy - cy) ** 2) / s ** 2)


def _concentrations(spec, rng):
    """Hematoxylin / eosin maps ``(2, H, W)`` and the tissue indicator."""
    w, h = spec.width, spec.height
    tissue = _tissue_field(rng, w, h)
    area = float(tissue.sum())
    n_nuc = spec.blob_count if spec.blob_count is not None else int(area / 350)
    n_lumen = max(3, int(area / 12000))

    def inside(n):
        pts = []
        while len(pts) < n:
            cand = rng.uniform([0, 0], [w - 1, h - 1], size=(4 * n + 16, 2))
            ok = tissue[cand[:, 1].astype(int), cand[:, 0].astype(int)] > 0.9
            pts.extend(cand[ok].tolist())
        return np.array(pts[:n])

    lumen = np.zeros((h, w))
    _splat(lumen, rng, inside(n_lumen), rng.uniform(6, 14, n_lumen), np.full(n_lumen, 1.6))
    lumen = np.clip(lumen, 0.0, 1.0)
    body = tissue * (1.0 - lumen)

    nuc = np.zeros((h, w))
    _splat(nuc, rng, inside(n_nuc), rng.uniform(1.8, 3.5, n_nuc), rng.uniform(0.8, 1.4, n_nuc))
    nuc = np.minimum(nuc, 1.6) * body

    eos = body * (0.65 + 0.2 * np.tanh(_smooth_noise(rng, w, h)))
    eos *= np.clip(1.0 - 1.2 * nuc, 0.0, 1.0)
    return np.stack([nuc, eos]), tissue, lumen


def render_stains(conc, stain_matrix, background=1.0):
    """Beer-Lambert RGB image from ``(2, H, W)`` concentrations."""
    od = np.tensordot(conc, np.asarray(stain_matrix).T, axes=(0, 0))
    return np.clip(background * 10.0 ** (-od), 0.0, 1.0)


def _sample_landmarks(spec, rng, truth, tissue, lumen, moving_tissue):
    w, h = spec.width, spec.height
    margin = 0.08 * min(w, h)
    ys, xs = np.mgrid[0:h, 0:w]
    ok = (moving_tissue > 0.95) & (xs > margin) & (xs < w - 1 - margin) \
        & (ys > margin) & (ys < h - 1 - margin)
    cand = np.stack([xs[ok], ys[ok]], axis=1).astype(np.float64)
    rng.shuffle(cand)
    mind = 0.5 * math.sqrt(ok.sum() / spec.landmark_count)
    chosen = []
    for p in cand:
        q = truth(p)
        qi = np.round(q).astype(int)
        if not (0 <= qi[0] < w and 0 <= qi[1] < h):
            continue
        if tissue[qi[1], qi[0]] < 0.95 or lumen[qi[1], qi[0]] > 0.05:
            continue
        if all(np.hypot(*(p - c)) >= mind for c in chosen):
            chosen.append(p)
        if len(chosen) == spec.landmark_count:
            break
    pairs = []
    for i, p in enumerate(chosen):
        q = truth(p)
        pairs.append(LandmarkPair((float(p[0]), float(p[1])), (float(q[0]), float(q[1])),
                                  f"L{i + 1:02d}"))
    return pairs


def generate_pair(spec):
    """Render a synthetic ``(moving, reference)`` pair with its true warp.

    The returned ``truth`` maps moving coordinates onto reference coordinates
    exactly; landmark pairs satisfy ``reference = truth(moving)``.
    """
    rng = np.random.default_rng(spec.seed)
    w, h = spec.width, spec.height
    conc, tissue, lumen = _concentrations(spec, rng)
    reference = render_stains(conc, spec.stain_matrix)
    reference = np.clip(reference + rng.normal(0, spec.noise_sigma, reference.shape), 0, 1)

    truth = SinusoidalWarp(spec.affine, spec.deform_amplitude, spec.deform_scale,
                           rng.uniform(0, 2 * np.pi), rng.uniform(0, 2 * np.pi))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    q = truth(np.stack([xs.ravel(), ys.ravel()], axis=1))
    coords = [q[:, 1], q[:, 0]]
    mconc = np.stack([map_coordinates(c, coords, order=3, mode="constant", cval=0.0)
                      .reshape(h, w) for c in conc])
    mconc = np.maximum(mconc, 0.0)
    mtissue = map_coordinates(tissue, coords, order=1, mode="constant", cval=0.0).reshape(h, w)
    moving = render_stains(mconc, spec.stain_matrix)
    # what an ideal appearance-translation model would produce from ``moving``
    translated = moving.copy()
    if spec.modality_gap:
        moving = 1.0 - moving @ REMIX.T
    moving = np.clip(moving + rng.normal(0, spec.noise_sigma, moving.shape), 0, 1)

    landmarks = _sample_landmarks(spec, rng, truth, tissue, lumen, mtissue)
    return SynthPair(moving, reference, truth, landmarks, conc, tissue, translated)


def write_pair(out_dir, pair, bits=8, tile_grid=None):
    """Write images, landmark files and the truth transform into ``out_dir``.

    With ``tile_grid`` the translated moving image is also sliced into
    ``out_dir/tiles`` in the external-tile layout.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_image(out / "moving.png", pair.moving, bits)
    save_image(out / "reference.png", pair.reference, bits)
    labels = [lm.label for lm in pair.landmarks]
    write_landmarks(out / "moving_landmarks.txt", labels, pair.moving_points)
    write_landmarks(out / "reference_landmarks.txt", labels, pair.reference_points)
    save_transform(out / "truth.txt", [(pair.truth, "truth")])
    if tile_grid is not None and pair.translated is not None:
        write_tiles(pair.translated, tile_grid, out / "tiles")
    return out
