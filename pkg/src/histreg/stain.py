"""Colour and stain transforms: Reinhard lαβ transfer, Macenko and Vahadane
stain estimation, and stain normalisation under the Beer-Lambert model.

Optical density is computed in base 10 throughout.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateStats, InsufficientTissue, ParseError, RankDeficient

__all__ = [
    "RGB2LMS", "LMS2LAB", "rgb_to_lab", "lab_to_rgb", "LabStats", "lab_stats",
    "reinhard_lab", "reinhard_transfer", "to_optical_density", "od_to_rgb",
    "StainModel", "nnls2", "stain_concentrations", "macenko_estimate",
    "vahadane_estimate", "vahadane_factorize", "vahadane_objective", "stain_normalize",
    "estimate_background", "format_stain_model", "parse_stain_model",
]

log = logging.getLogger(__name__)

# Reinhard et al. (2001) RGB -> LMS
RGB2LMS = np.array([[0.3811, 0.5783, 0.0402],
                    [0.1967, 0.7244, 0.0782],
                    [0.0241, 0.1288, 0.8444]])
# log-LMS -> lαβ (Ruderman)
LMS2LAB = (np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)])
           @ np.array([[1.0, 1.0, 1.0], [1.0, 1.0, -2.0], [1.0, -1.0, 0.0]]))
LMS2RGB = np.linalg.inv(RGB2LMS)
LAB2LMS = np.linalg.inv(LMS2LAB)

LAB_EPS = 1e-6
OD_EPS = 1e-6


def _rgb(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an RGB image of shape (H, W, 3), got {img.shape}")
    return img


def rgb_to_lab(img):
    lms = _rgb(img) @ RGB2LMS.T
    return np.log10(np.maximum(lms, LAB_EPS)) @ LMS2LAB.T


def lab_to_rgb(lab, clip=True):
    lms = 10.0 ** (np.asarray(lab, dtype=np.float64) @ LAB2LMS.T)
    rgb = lms @ LMS2RGB.T
    return np.clip(rgb, 0.0, 1.0) if clip else rgb


@dataclass(frozen=True, eq=False)
class LabStats:
    """Per-channel mean and population standard deviation in lαβ."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64).reshape(3))
        if np.any(self.std < 0) or not np.all(np.isfinite(self.std)):
            raise ValueError("std must be finite and non-negative")


def _mask_or_all(img, mask):
    if mask is None:
        return np.ones(img.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {img.shape[:2]}")
    return mask


def lab_stats(img, mask=None):
    """lαβ statistics of the masked pixels (all pixels when ``mask`` is None)."""
    img = _rgb(img)
    mask = _mask_or_all(img, mask)
    if not mask.any():
        raise DegenerateStats("empty mask")
    lab = rgb_to_lab(img)[mask]
    return LabStats(lab.mean(axis=0), lab.std(axis=0))


def reinhard_lab(source, source_mask, target):
    """Reinhard transfer in lαβ; returns the unclamped lαβ image.

    Masked pixels get ``(x - mu_src) * sd_tgt / sd_src + mu_tgt`` per
    channel; others keep their original lαβ values.
    """
    source = _rgb(source)
    mask = _mask_or_all(source, source_mask)
    if not mask.any():
        raise DegenerateStats("source mask is empty")
    lab = rgb_to_lab(source)
    px = lab[mask]
    mu, sd = px.mean(axis=0), px.std(axis=0)
    if np.any(sd < 1e-9):
        raise DegenerateStats(f"source lαβ std too small: {sd}")
    out = lab.copy()
    out[mask] = (px - mu) * (target.std / sd) + target.mean
    return out


def reinhard_transfer(source, source_mask, target):
    """Match the masked source's lαβ statistics to ``target`` (a :class:`LabStats`).

    Pixels outside the mask pass through unchanged.
    """
    source = _rgb(source)
    mask = _mask_or_all(source, source_mask)
    out = source.copy()
    out[mask] = lab_to_rgb(reinhard_lab(source, mask, target)[mask])
    return out


# --------------------------------------------------------------------------
# Beer-Lambert


def to_optical_density(img, background=1.0):
    """``OD = -log10(max(I, 1e-6) / I0)`` per channel."""
    img = np.asarray(img, dtype=np.float64)
    return -np.log10(np.maximum(img, OD_EPS) / background)


def od_to_rgb(od, background=1.0):
    return np.clip(background * 10.0 ** (-np.asarray(od, dtype=np.float64)), 0.0, 1.0)


def estimate_background(img, percentile=99.0):
    """Per-channel white level as a high intensity percentile."""
    px = _rgb(img).reshape(-1, 3)
    return np.maximum(np.percentile(px, percentile, axis=0), OD_EPS)


@dataclass(frozen=True, eq=False)
class StainModel:
    """Unit-norm OD stain vectors (columns of a 3x2 matrix) plus scale data.

    ``max_concentration`` is the 99th percentile concentration per stain and
    ``background`` the white level ``I0`` used for the OD conversion.
    ``converged`` is False when an iterative estimator hit its iteration cap.
    """

    stain_matrix: np.ndarray
    max_concentration: np.ndarray
    background: float | np.ndarray = 1.0
    converged: bool = True
    history: tuple = field(default=(), repr=False)

    def __post_init__(self):
        m = np.asarray(self.stain_matrix, dtype=np.float64).reshape(3, 2)
        norms = np.linalg.norm(m, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError(f"stain columns must have unit norm, got {norms}")
        if np.any(m < 0):
            raise ValueError("stain vectors must be non-negative")
        cosang = float(np.clip(m[:, 0] @ m[:, 1], -1, 1))
        if np.degrees(np.arccos(cosang)) < 1.0:
            raise RankDeficient("stain vectors are (nearly) parallel")
        object.__setattr__(self, "stain_matrix", m)
        object.__setattr__(self, "max_concentration",
                           np.asarray(self.max_concentration, dtype=np.float64).reshape(2))


def _unit_nonneg(v):
    v = np.asarray(v, dtype=np.float64)
    if v.sum() < 0:
        v = -v
    v = np.maximum(v, 0.0)
    n = np.linalg.norm(v)
    if n == 0:
        raise RankDeficient("stain direction vanished after sign fixing")
    return v / n


def _order_columns(w):
    """Stain 1 is the column with the larger blue-channel OD component."""
    if w[2, 1] > w[2, 0]:
        w = w[:, ::-1]
    return np.ascontiguousarray(w)


def nnls2(od, w):
    """Exact non-negative least squares of ``od`` rows on the two columns of ``w``.

    Parameters
    ----------
    od : (N, 3) array
    w : (3, 2) array

    Returns
    -------
    (N, 2) array of non-negative concentrations.
    """
    od = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    g = w.T @ w
    b = od @ w
    c = np.linalg.solve(g, b.T).T
    bad = (c < 0).any(axis=1)
    if bad.any():
        bb = b[bad]
        # best single-stain fits, clipped at zero
        c1 = np.maximum(bb[:, 0] / g[0, 0], 0.0)
        c2 = np.maximum(bb[:, 1] / g[1, 1], 0.0)
        o = od[bad]
        r1 = ((o - c1[:, None] * w[:, 0]) ** 2).sum(1)
        r2 = ((o - c2[:, None] * w[:, 1]) ** 2).sum(1)
        use1 = r1 <= r2
        alt = np.zeros_like(bb)
        alt[use1, 0] = c1[use1]
        alt[~use1, 1] = c2[~use1]
        c[bad] = alt
    return c


def stain_concentrations(img, model):
    """Per-pixel concentrations ``(H, W, 2)`` under ``model``."""
    img = _rgb(img)
    od = to_optical_density(img, model.background).reshape(-1, 3)
    return nnls2(od, model.stain_matrix).reshape(img.shape[:2] + (2,))


def _tissue_od(img, mask, od_threshold, background):
    img = _rgb(img)
    mask = _mask_or_all(img, mask)
    if background is None:
        background = estimate_background(img)
    od = to_optical_density(img, background)[mask]
    keep = np.linalg.norm(od, axis=1) > od_threshold
    od = od[keep]
    if len(od) < 100:
        raise InsufficientTissue(f"only {len(od)} pixels above OD threshold {od_threshold}")
    return od, background


def _macenko_matrix(od, ang_percentile):
    cov = np.cov(od, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    if evals[1] < 1e-6 * evals[0]:
        raise RankDeficient(f"second eigenvalue {evals[1]:.3g} negligible vs {evals[0]:.3g}")
    e = evecs[:, :2].copy()
    for j in range(2):
        if e[:, j].sum() < 0:
            e[:, j] = -e[:, j]
    t = od @ e
    phi = np.arctan2(t[:, 1], t[:, 0])
    lo, hi = np.percentile(phi, [100 * ang_percentile, 100 * (1 - ang_percentile)])
    v1 = _unit_nonneg(e @ [np.cos(lo), np.sin(lo)])
    v2 = _unit_nonneg(e @ [np.cos(hi), np.sin(hi)])
    return _order_columns(np.stack([v1, v2], axis=1))


def _max_conc(od, w):
    c = nnls2(od, w)
    return np.maximum(np.percentile(c, 99, axis=0), 1e-12)


def macenko_estimate(img, mask=None, od_threshold=0.15, ang_percentile=0.01,
                     background=1.0):
    """Macenko stain estimation from the angular extremes of the OD plane.

    ``background=None`` estimates the white level from the image.
    """
    od, background = _tissue_od(img, mask, od_threshold, background)
    w = _macenko_matrix(od, ang_percentile)
    return StainModel(w, _max_conc(od, w), background)


def vahadane_objective(v, w, h, sparsity):
    return float(((v - w @ h) ** 2).sum() + sparsity * np.abs(h).sum())


def vahadane_estimate(img, mask=None, sparsity=0.1, dict_size=2, iters=200,
                      background=1.0, od_threshold=0.15, tol=1e-6):
    """Vahadane stain model; see :func:`vahadane_factorize`."""
    return vahadane_factorize(img, mask, sparsity, dict_size, iters, background,
                              od_threshold, tol)[0]


def vahadane_factorize(img, mask=None, sparsity=0.1, dict_size=2, iters=200,
                       background=1.0, od_threshold=0.15, tol=1e-6):
    """Sparse non-negative factorisation ``V ~ W H`` of tissue OD pixels.

    Minimises ``||V - W H||_F^2 + sparsity * sum(H)`` over ``W, H >= 0``
    with unit-norm columns of ``W`` by exact block-coordinate (HALS) updates,
    so the objective never increases.  ``W`` starts from the Macenko
    estimate.  If ``iters`` is exhausted before the relative objective change
    drops below ``tol`` the model is returned with ``converged=False``.

    Returns
    -------
    (StainModel, V, H) with ``V`` the 3xN tissue OD matrix and ``H`` the
    2xN sparse codes, columns ordered like the model.
    """
    if dict_size != 2:
        raise ValueError("only two-stain dictionaries are supported")
    od, background = _tissue_od(img, mask, od_threshold, background)
    w = _macenko_matrix(od, 0.01)
    v = od.T
    h = nnls2(od, w).T
    half = sparsity / 2.0
    hist = [vahadane_objective(v, w, h, sparsity)]
    converged = False
    for _ in range(iters):
        # H rows
        a = w.T @ v
        b = w.T @ w
        for j in range(2):
            o = 1 - j
            h[j] = np.maximum((a[j] - b[j, o] * h[o] - half) / b[j, j], 0.0)
        # W columns, kept at unit norm
        p = v @ h.T
        q = h @ h.T
        for j in range(2):
            o = 1 - j
            g = p[:, j] - w[:, o] * q[o, j]
            gp = np.maximum(g, 0.0)
            n = np.linalg.norm(gp)
            if n > 0:
                w[:, j] = gp / n
            elif q[j, j] > 0:
                w[:, j] = np.eye(3)[np.argmax(g)]
        f = vahadane_objective(v, w, h, sparsity)
        hist.append(f)
        if abs(hist[-2] - f) <= tol * max(abs(hist[-2]), 1e-300):
            converged = True
            break
    if not converged:
        log.warning("vahadane_estimate: no convergence after %d iterations", iters)
    if np.any(w < 0):
        w = np.maximum(w, 0.0)
    w = w / np.linalg.norm(w, axis=0)
    order = [0, 1] if w[2, 0] >= w[2, 1] else [1, 0]
    w = np.ascontiguousarray(w[:, order])
    h = h[order]
    maxc = np.maximum(np.percentile(h, 99, axis=1), 1e-12)
    return StainModel(w, maxc, background, converged, tuple(hist)), v, h


def stain_normalize(source, source_model, target_model):
    """Re-render ``source`` with the target stain vectors and concentration scale."""
    source = _rgb(source)
    od = to_optical_density(source, source_model.background).reshape(-1, 3)
    c = nnls2(od, source_model.stain_matrix)
    c = c * (target_model.max_concentration / source_model.max_concentration)
    out = c @ target_model.stain_matrix.T
    return od_to_rgb(out, target_model.background).reshape(source.shape)


STAIN_HEADER = "# histreg stain model v1"


def format_stain_model(model):
    """Text form: one ``key = values`` line per field, 17 significant digits."""
    def f(vals):
        return " ".join(format(float(v), ".17g") for v in np.ravel(vals))

    return "\n".join([
        STAIN_HEADER,
        f"stain_matrix = {f(model.stain_matrix)}",
        f"max_concentration = {f(model.max_concentration)}",
        f"background = {f(model.background)}",
        f"converged = {str(model.converged).lower()}",
    ]) + "\n"


def parse_stain_model(text, path=None):
    fields_ = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", path, lineno)
        key, value = (t.strip() for t in line.split("=", 1))
        fields_[key] = (lineno, value)
    try:
        nums = {}
        for key, n in (("stain_matrix", 6), ("max_concentration", 2)):
            lineno, value = fields_[key]
            try:
                vals = [float(v) for v in value.split()]
            except ValueError:
                raise ParseError(f"non-numeric {key}", path, lineno) from None
            if len(vals) != n:
                raise ParseError(f"{key} needs {n} numbers, got {len(vals)}", path, lineno)
            nums[key] = vals
        bg = [float(v) for v in fields_.get("background", (0, "1"))[1].split()]
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}", path) from None
    conv = fields_.get("converged", (0, "true"))[1].lower() == "true"
    return StainModel(np.reshape(nums["stain_matrix"], (3, 2)), nums["max_concentration"],
                      bg[0] if len(bg) == 1 else np.array(bg), conv)
