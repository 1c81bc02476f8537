"""Feature-based rigid registration followed by two non-rigid refinements.

Pipeline (``register_pair``):

1. downscale both images to the working resolution (max side 1024 px),
2. detect, describe and match keypoints,
3. RANSAC affine, Tukey IRLS refinement, neighbourhood filtering,
4. coarse thin-plate spline on the retained keypoints,
5. block matching at full resolution on the coarse-aligned image,
6. fine thin-plate spline on the block matches.

Geometry conventions: ``rigid`` maps moving -> reference coordinates.  Both
TPS stages are backward maps defined on the reference frame, so the full
reference -> moving sampling map is ``rigid^-1 ∘ coarse ∘ fine``; the
moving -> reference map is its numerical inverse.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import (AffineTransform2D, TpsWarp, compose, format_transform,
                   parse_transforms, rescale, resample, to_gray, tps_kernel)
from .errors import (DegenerateWeights, NoConsensus, RegistrationFailed,
                     SingularSystem, TooFewMatches)
from .features import MatchSet, describe, detect_keypoints, match
from .preprocess import DARK_FOREGROUND, otsu_mask

__all__ = [
    "MatchSet", "fit_affine", "ransac_affine", "tukey_refine", "tukey_rho",
    "neighborhood_filter", "estimate_tps", "block_match_refine",
    "RegistrationConfig", "RegistrationResult", "register_pair",
    "format_result", "parse_result",
]

RIGID_ONLY, COARSE, FINE = "rigidOnly", "coarse", "fine"


# --------------------------------------------------------------------------
# affine estimation


def fit_affine(src, dst, weights=None):
    """Weighted least-squares affine mapping ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    a = np.column_stack([src, np.ones(len(src))]) * np.sqrt(w)[:, None]
    b = dst * np.sqrt(w)[:, None]
    if np.linalg.matrix_rank(a, tol=1e-9 * max(1.0, np.abs(a).max())) < 3:
        raise SingularSystem("points are collinear or coincident")
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    return AffineTransform2D.from_matrix(sol.T)


def _solve3(src, dst):
    """Exact affines through point triples: src, dst ``(K, 3, 2)`` -> ``(K, 2, 3)``."""
    a = np.concatenate([src, np.ones(src.shape[:2] + (1,))], axis=2)
    det = np.linalg.det(a)
    ok = np.abs(det) > 1e-6
    m = np.full((len(src), 2, 3), np.nan)
    if ok.any():
        m[ok] = np.linalg.solve(a[ok], dst[ok]).transpose(0, 2, 1)
    return m, ok


def ransac_affine(matches, threshold=3.0, max_iters=2000, seed=0, min_inlier_ratio=0.1):
    """Robust affine (moving -> reference) from 3-point minimal samples.

    The final model is the least-squares refit on the largest consensus set;
    returns ``(affine, inlier MatchSet)``.
    """
    n = len(matches)
    if n < 3:
        raise TooFewMatches(f"{n} matches, need at least 3")
    rng = np.random.default_rng(seed)
    src, dst = matches.moving, matches.reference
    best = None
    best_count, best_err = -1, np.inf
    batch = 250
    for start in range(0, max_iters, batch):
        k = min(batch, max_iters - start)
        idx = np.array([rng.choice(n, 3, replace=False) for _ in range(k)])
        m, ok = _solve3(src[idx], dst[idx])
        if not ok.any():
            continue
        m = m[ok]
        pred = np.einsum("kij,nj->kni", m[:, :, :2], src) + m[:, None, :, 2]
        err = np.linalg.norm(pred - dst[None], axis=2)
        inl = err < threshold
        counts = inl.sum(1)
        tot = np.where(inl, err, 0).sum(1)
        for c in np.flatnonzero(counts == counts.max()):
            if counts[c] > best_count or (counts[c] == best_count and tot[c] < best_err):
                best_count, best_err, best = int(counts[c]), float(tot[c]), inl[c]
    if best is None or best_count < 3 or best_count < min_inlier_ratio * n:
        raise NoConsensus(f"best consensus {max(best_count, 0)} of {n} matches")
    model = fit_affine(src[best], dst[best])
    # one re-selection pass with the refitted model
    err = np.linalg.norm(model(src) - dst, axis=1)
    inl = err < threshold
    if inl.sum() >= 3:
        try:
            model = fit_affine(src[inl], dst[inl])
            err = np.linalg.norm(model(src) - dst, axis=1)
            inl = err < threshold
        except SingularSystem:
            inl = best
    if inl.sum() < 3:
        raise NoConsensus("refitted model has fewer than 3 inliers")
    return model, matches.subset(np.flatnonzero(inl))


RAYLEIGH_MEDIAN = float(np.sqrt(2 * np.log(2)))


def tukey_rho(r, c):
    """Tukey biweight loss, normalised so that ``rho(r >= c) = c**2 / 6``."""
    r = np.abs(np.asarray(r, dtype=np.float64))
    out = np.full(r.shape, c * c / 6.0)
    m = r < c
    u = (r[m] / c) ** 2
    out[m] = c * c / 6.0 * (1 - (1 - u) ** 3)
    return out


def _tukey_scale(res):
    # residual norms of isotropic 2-D Gaussian noise are Rayleigh distributed;
    # median / sqrt(2 ln 2) is the consistent per-axis sigma
    return max(float(np.median(res)) / RAYLEIGH_MEDIAN, 1e-6)


def tukey_weights(matches, model, c=4.685, scale=None):
    res = np.linalg.norm(model(matches.moving) - matches.reference, axis=1)
    if scale is None:
        scale = _tukey_scale(res)
    u = res / (c * scale)
    return np.where(u < 1, (1 - u ** 2) ** 2, 0.0), scale


def tukey_refine(matches, initial, c=4.685, iters=20, return_history=False):
    """Iteratively reweighted least squares with the Tukey biweight.

    The residual scale is ``median / sqrt(2 ln 2)`` of the initial residual
    norms (floored at 1e-6) and stays fixed, which makes each IRLS step a
    majorise-minimise step: the summed loss never increases.  Iteration
    stops once the loss changes by less than rounding noise; such a final
    step is not taken.

    Returns the refined affine, plus the per-iteration summed loss when
    ``return_history`` is set.
    """
    if len(matches) < 3:
        raise TooFewMatches(f"{len(matches)} matches, need at least 3")
    src, dst = matches.moving, matches.reference
    res = np.linalg.norm(initial(src) - dst, axis=1)
    scale = _tukey_scale(res)
    model = initial
    hist = [float(tukey_rho(res / scale, c).sum())]
    for _ in range(iters):
        u = res / (c * scale)
        w = np.where(u < 1, (1 - u ** 2) ** 2, 0.0)
        if np.count_nonzero(w) < 3:
            raise DegenerateWeights("fewer than three matches keep a non-zero weight")
        try:
            new = fit_affine(src, dst, w)
        except SingularSystem as exc:
            raise DegenerateWeights(str(exc)) from None
        res_new = np.linalg.norm(new(src) - dst, axis=1)
        f = float(tukey_rho(res_new / scale, c).sum())
        if abs(f - hist[-1]) <= 1e-12 * max(hist[0], 1.0):
            break
        change = np.abs(new.params - model.params).max()
        model, res = new, res_new
        hist.append(f)
        if change < 1e-9:
            break
    return (model, hist) if return_history else model


def neighborhood_filter(matches, k=8, deviation_factor=3.0, model=None):
    """Drop matches whose displacement disagrees with their ``k`` neighbours.

    Displacements are ``reference - model(moving)``; ``model`` defaults to
    the least-squares affine of all matches, so a set related by a single
    affine map has zero residual displacement and loses nothing.  A match
    is removed when its deviation from the median displacement of its ``k``
    nearest neighbours (by reference position) exceeds ``deviation_factor``
    times the neighbours' own median deviation, floored at 1 px.  Fewer
    than ``k + 1`` matches pass through unchanged.
    """
    n = len(matches)
    if n < k + 1:
        return matches
    if model is None:
        try:
            model = fit_affine(matches.moving, matches.reference)
        except SingularSystem:
            model = AffineTransform2D()
    disp = matches.reference - model(matches.moving)
    tree = cKDTree(matches.reference)
    _, nb = tree.query(matches.reference, k=k + 1)
    nb = nb[:, 1:]
    med = np.median(disp[nb], axis=1)
    dev = np.linalg.norm(disp - med, axis=1)
    nb_dev = np.median(np.linalg.norm(disp[nb] - med[:, None, :], axis=2), axis=1)
    keep = dev <= deviation_factor * np.maximum(nb_dev, 1.0)
    return matches.subset(np.flatnonzero(keep))


# --------------------------------------------------------------------------
# thin-plate splines


def estimate_tps(matches, lam=0.0):
    """TPS sending each ``reference`` point to its ``moving`` partner.

    ``lam`` is added to the kernel diagonal; ``lam = 0`` interpolates.
    """
    ctrl = matches.reference
    tgt = matches.moving
    n = len(ctrl)
    if n < 3:
        raise SingularSystem(f"{n} control points, need at least 3")
    p = np.column_stack([np.ones(n), ctrl])
    if np.linalg.matrix_rank(p, tol=1e-9 * max(1.0, np.abs(ctrl).max())) < 3:
        raise SingularSystem("control points are collinear")
    if len(np.unique(ctrl, axis=0)) < n:
        raise SingularSystem("duplicate control points")
    d = np.linalg.norm(ctrl[:, None] - ctrl[None], axis=2)
    kmat = tps_kernel(d) + lam * np.eye(n)
    a = np.zeros((n + 3, n + 3))
    a[:n, :n] = kmat
    a[:n, n:] = p
    a[n:, :n] = p.T
    b = np.zeros((n + 3, 2))
    b[:n] = tgt
    try:
        sol = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from None
    if not np.all(np.isfinite(sol)):
        raise SingularSystem("non-finite TPS solution")
    w = sol[:n]
    c0, cx, cy = sol[n], sol[n + 1], sol[n + 2]
    aff = AffineTransform2D(cx[0], cy[0], cx[1], cy[1], c0[0], c0[1])
    return TpsWarp(ctrl, aff, w, lam)


# --------------------------------------------------------------------------
# block matching


def _ncc_surface(block, region):
    """Zero-normalised cross-correlation of ``block`` at every offset in ``region``."""
    bh, bw = block.shape
    b = block - block.mean()
    bn = math.sqrt(float((b * b).sum()))
    win = np.lib.stride_tricks.sliding_window_view(region, (bh, bw))
    num = np.einsum("ijkl,kl->ij", win, b)
    c1 = np.pad(region, ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    c2 = np.pad(region * region, ((1, 0), (1, 0))).cumsum(0).cumsum(1)

    def box(c):
        return c[bh:, bw:] - c[:-bh, bw:] - c[bh:, :-bw] + c[:-bh, :-bw]

    npx = bh * bw
    s1, s2 = box(c1), box(c2)
    var = np.maximum(s2 - s1 * s1 / npx, 0.0)
    den = np.sqrt(var) * bn
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 1e-12, num / den, np.nan)
    return out


def _parabola(fm, f0, fp):
    den = fm - 2 * f0 + fp
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (fm - fp) / den, -0.5, 0.5))


def block_match_refine(moving, reference, prior=None, block_size=64, search_radius=10,
                       min_ncc=0.5, min_coverage=0.2, mask=None):
    """Local displacements between ``reference`` and a pre-aligned ``moving``.

    ``prior`` (a reference -> moving map) resamples ``moving`` into the
    reference frame first; pass None when it is already aligned.  Each block
    of a regular grid with enough tissue is matched by exhaustive NCC within
    ``search_radius`` and refined to sub-pixel precision with a parabola fit
    through the 3x3 NCC neighbourhood.  Emits ``(centre + offset, centre)``
    pairs whose peak NCC is at least ``min_ncc``.
    """
    ref = to_gray(reference)
    mov = to_gray(moving)
    h, w = ref.shape
    if prior is not None:
        mov = resample(mov, prior, w, h, step=4)
    if mask is None:
        try:
            mask = otsu_mask(ref, DARK_FOREGROUND)
        except Exception:
            mask = np.ones_like(ref, dtype=bool)
    r = search_radius
    pad = np.pad(mov, r + 1, mode="constant")
    mv, rf, nc = [], [], []
    bs = block_size
    # the grid keeps every search window (plus guard band) inside the image
    m = r + 1
    for y0 in range(m, h - bs - m + 1, bs):
        for x0 in range(m, w - bs - m + 1, bs):
            if mask[y0:y0 + bs, x0:x0 + bs].mean() < min_coverage:
                continue
            block = ref[y0:y0 + bs, x0:x0 + bs]
            if block.std() < 1e-6:
                continue
            region = pad[y0:y0 + bs + 2 * r + 2, x0:x0 + bs + 2 * r + 2]
            surf = _ncc_surface(block, region)
            if not np.isfinite(surf).any():
                continue
            s = np.where(np.isfinite(surf), surf, -np.inf)
            iy, ix = np.unravel_index(np.argmax(s), s.shape)
            peak = s[iy, ix]
            # offsets 0 and 2r+2 are the one-pixel guard band around the window
            if peak < min_ncc or iy in (0, s.shape[0] - 1) or ix in (0, s.shape[1] - 1):
                continue
            fy = _parabola(s[iy - 1, ix], peak, s[iy + 1, ix])
            fx = _parabola(s[iy, ix - 1], peak, s[iy, ix + 1])
            dy = iy - (r + 1) + fy
            dx = ix - (r + 1) + fx
            cx, cy = x0 + (bs - 1) / 2.0, y0 + (bs - 1) / 2.0
            mv.append((cx + dx, cy + dy))
            rf.append((cx, cy))
            nc.append(peak)
    if not mv:
        return MatchSet.empty()
    return MatchSet(np.array(mv), np.array(rf), np.array(nc))


# --------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class RegistrationConfig:
    working_size: int = 1024
    max_keypoints: int = 5000
    fast_threshold: float = 0.04
    descriptor: str = "brisk"
    ratio: float = 0.8
    ransac_threshold: float = 3.0
    ransac_iters: int = 2000
    tukey_c: float = 4.685
    tukey_iters: int = 20
    neighbor_k: int = 8
    neighbor_factor: float = 3.0
    coarse_lambda: float = 1.0
    coarse_tolerance: float = 12.0
    coarse_spacing: float = 0.02
    block_size: int = 64
    search_radius: int = 10
    min_ncc: float = 0.5
    fine_lambda: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.descriptor != "brisk":
            raise ValueError(f"unsupported descriptor {self.descriptor!r}")


@dataclass(eq=False)
class RegistrationResult:
    rigid: AffineTransform2D
    coarse: TpsWarp | None = None
    fine: TpsWarp | None = None
    inliers: MatchSet = field(default_factory=MatchSet.empty)
    keypoint_count: int = 0
    stage_used: str = RIGID_ONLY
    diagnostics: dict = field(default_factory=dict)

    def backward(self, points):
        """Reference-frame points -> moving-image coordinates."""
        q = np.asarray(points, dtype=np.float64)
        if self.stage_used == FINE and self.fine is not None:
            q = self.fine(q)
        if self.stage_used in (COARSE, FINE) and self.coarse is not None:
            q = self.coarse(q)
        return self.rigid.inverse()(q)

    def forward(self, points, tol=1e-8, max_iter=50):
        """Moving-image points -> reference frame (Newton inversion of ``backward``)."""
        m = np.asarray(points, dtype=np.float64)
        shape = m.shape
        m = m.reshape(-1, 2)
        y = self.rigid(m)
        if self.stage_used == RIGID_ONLY:
            return y.reshape(shape)
        eps = 0.5
        for _ in range(max_iter):
            f = self.backward(y) - m
            if np.abs(f).max() < tol:
                break
            jx = (self.backward(y + [eps, 0]) - self.backward(y - [eps, 0])) / (2 * eps)
            jy = (self.backward(y + [0, eps]) - self.backward(y - [0, eps])) / (2 * eps)
            det = jx[:, 0] * jy[:, 1] - jy[:, 0] * jx[:, 1]
            det = np.where(np.abs(det) < 1e-12, 1e-12, det)
            sx = (jy[:, 1] * f[:, 0] - jy[:, 0] * f[:, 1]) / det
            sy = (-jx[:, 1] * f[:, 0] + jx[:, 0] * f[:, 1]) / det
            y = y - np.column_stack([sx, sy])
        return y.reshape(shape)

    __call__ = forward

    def warp(self, moving, width, height, step=2):
        """Render ``moving`` in the reference frame."""
        return resample(moving, self.backward, width, height, step=step)


def _to_full(scale):
    """Affine mapping working-resolution pixels to full-resolution pixels."""
    k = 1.0 / scale
    return AffineTransform2D(k, 0.0, 0.0, k, 0.5 * k - 0.5, 0.5 * k - 0.5)


def _thin(matches, spacing):
    """Keep the best-scoring match per ``spacing``-sized cell (reference side)."""
    if spacing <= 0 or len(matches) == 0:
        return matches
    cells = np.floor(matches.reference / spacing).astype(np.int64)
    order = np.lexsort((matches.distance, cells[:, 1], cells[:, 0]))
    seen, keep = set(), []
    for i in order:
        key = (cells[i, 0], cells[i, 1])
        if key not in seen:
            seen.add(key)
            keep.append(i)
    return matches.subset(np.sort(np.array(keep)))


def register_pair(moving, reference, cfg=RegistrationConfig(), reference_mask=None):
    """Register ``moving`` onto ``reference``; both already preprocessed.

    Raises :class:`RegistrationFailed` when no rigid transform can be found.
    Non-rigid stages degrade gracefully: ``stage_used`` reports the deepest
    stage that succeeded.
    """
    mg, rg = to_gray(moving), to_gray(reference)
    diag = {}
    side = max(mg.shape + rg.shape)
    scale = min(1.0, cfg.working_size / side)
    mw, rw = rescale(mg, scale), rescale(rg, scale)

    km = detect_keypoints(mw, cfg.max_keypoints, cfg.fast_threshold)
    kr = detect_keypoints(rw, cfg.max_keypoints, cfg.fast_threshold)
    km, dm = describe(mw, km)
    kr, dr = describe(rw, kr)
    diag.update(keypoints_moving=len(km), keypoints_reference=len(kr))
    ia, ib, dist = match(dm, dr, cfg.ratio)
    diag["matches"] = len(ia)
    pm = np.array([(k.x, k.y) for k in km]).reshape(-1, 2)[ia]
    pr = np.array([(k.x, k.y) for k in kr]).reshape(-1, 2)[ib]
    full = _to_full(scale)
    raw = MatchSet(pm, pr, dist)
    try:
        model_w, inl = ransac_affine(raw, cfg.ransac_threshold, cfg.ransac_iters, cfg.seed)
        diag["ransac_inliers"] = len(inl)
        model_w = tukey_refine(inl, model_w, cfg.tukey_c, cfg.tukey_iters)
        w, _ = tukey_weights(inl, model_w, cfg.tukey_c)
        inl = inl.subset(np.flatnonzero(w > 0))
        diag["tukey_inliers"] = len(inl)
        inl = neighborhood_filter(inl, cfg.neighbor_k, cfg.neighbor_factor, model_w)
        diag["neighborhood_inliers"] = len(inl)
        if len(inl) < 3:
            raise NoConsensus(f"{len(inl)} matches survive filtering")
    except (TooFewMatches, NoConsensus, DegenerateWeights, SingularSystem) as exc:
        raise RegistrationFailed(exc, diag) from exc
    rigid = compose(compose(full, model_w), full.inverse())
    inliers = MatchSet(full(inl.moving), full(inl.reference), inl.distance)
    result = RegistrationResult(rigid, inliers=inliers, keypoint_count=len(inliers),
                                diagnostics=diag)

    # coarse non-rigid: reference -> rigidly mapped moving.  Control points
    # come from every raw match within the deformation tolerance of the rigid
    # model that agrees with its neighbours, not only the rigid consensus.
    res = np.linalg.norm(model_w(raw.moving) - raw.reference, axis=1)
    cand = raw.subset(np.flatnonzero(res < cfg.coarse_tolerance))
    cand = neighborhood_filter(cand, cfg.neighbor_k, cfg.neighbor_factor, model_w)
    cand = MatchSet(full(cand.moving), full(cand.reference), cand.distance)
    diag["coarse_candidates"] = len(cand)
    spacing = cfg.coarse_spacing * side
    ctrl = _thin(MatchSet(rigid(cand.moving), cand.reference, cand.distance), spacing)
    try:
        result.coarse = estimate_tps(ctrl, cfg.coarse_lambda)
        result.stage_used = COARSE
        diag["coarse_control_points"] = len(ctrl)
    except SingularSystem as exc:
        diag["coarse_error"] = str(exc)
        return result

    # fine non-rigid: block matching at full resolution
    h, w = rg.shape
    prior = lambda q: rigid.inverse()(result.coarse(q))  # noqa: E731
    if reference_mask is None:
        try:
            reference_mask = otsu_mask(rg, DARK_FOREGROUND)
        except Exception:
            reference_mask = np.ones(rg.shape, dtype=bool)
    blocks = block_match_refine(mg, rg, prior, cfg.block_size, cfg.search_radius,
                                cfg.min_ncc, mask=reference_mask)
    diag["block_matches"] = len(blocks)
    blocks = neighborhood_filter(blocks, cfg.neighbor_k, cfg.neighbor_factor)
    diag["block_matches_filtered"] = len(blocks)
    if len(blocks):
        diag["ncc_median"] = float(np.median(blocks.distance))
    try:
        result.fine = estimate_tps(blocks, cfg.fine_lambda)
        result.stage_used = FINE
    except SingularSystem as exc:
        diag["fine_error"] = str(exc)
    return result


# --------------------------------------------------------------------------
# serialisation


def format_result(result):
    parts = [format_transform(result.rigid, "rigid")]
    if result.coarse is not None:
        parts.append(format_transform(result.coarse, "coarse"))
    if result.fine is not None:
        parts.append(format_transform(result.fine, "fine"))
    diag = ["type = diagnostics", f"stage_used = {result.stage_used}",
            f"keypoint_count = {result.keypoint_count}"]
    for k in sorted(result.diagnostics):
        v = result.diagnostics[k]
        diag.append(f"{k} = {format(v, '.17g') if isinstance(v, float) else v}")
    parts.append("\n".join(diag) + "\n")
    return "# histreg transform v1\n" + "---\n".join(parts)


def parse_result(text, path=None):
    """Inverse of :func:`format_result`."""
    blocks = parse_transforms(text, path)
    roles = {role: t for t, role, _ in blocks if t is not None}
    extras = next((e for t, kind, e in blocks if t is None and kind == "diagnostics"), {})
    if "rigid" not in roles:
        raise SingularSystem("registration file lacks a rigid block")
    stage = extras.pop("stage_used", RIGID_ONLY)
    count = int(extras.pop("keypoint_count", 0))
    return RegistrationResult(roles["rigid"], roles.get("coarse"), roles.get("fine"),
                              keypoint_count=count, stage_used=stage, diagnostics=extras)
