"""Registration scoring: rTRE and its MM/AM aggregates, point-based
evaluation, keypoint statistics, CSV export and visual comparisons.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import image_diagonal, same_shape
from .errors import EmptyInput, ParseError

__all__ = [
    "LandmarkPair", "PairMetrics", "MethodSummary", "rtre", "rtre_values",
    "median", "mmrtre", "amrtre", "point_eval", "pair_metrics",
    "summarize_method", "keypoint_stats", "checkerboard", "overlay",
    "read_landmarks", "write_landmarks", "pair_landmarks", "CSV_COLUMNS",
    "metrics_rows", "write_metrics_csv", "format_report",
]

log = logging.getLogger(__name__)

LANDMARK_HEADER = "# landmarks v1"
CSV_COLUMNS = ["method", "pair_id", "median_rtre", "mm_rtre", "am_rtre",
               "median_point_distance", "keypoint_count", "median_point_distance_rel"]


@dataclass(frozen=True)
class LandmarkPair:
    """A transformed moving landmark and its ground-truth reference position."""

    moving: tuple
    reference: tuple
    label: str = ""


def median(values):
    """Median; for an even count the mean of the two central order statistics."""
    v = sorted(float(x) for x in values)
    n = len(v)
    if n == 0:
        raise EmptyInput("median of an empty sequence")
    mid = n // 2
    return v[mid] if n % 2 else (v[mid - 1] + v[mid]) / 2.0


def rtre(pair, reference):
    """Landmark distance divided by the reference image diagonal.

    ``reference`` may be an image or an ``(height, width)`` tuple.
    """
    diag = _diagonal(reference)
    dx = pair.moving[0] - pair.reference[0]
    dy = pair.moving[1] - pair.reference[1]
    return math.hypot(dx, dy) / diag


def _diagonal(reference):
    if isinstance(reference, tuple) and len(reference) == 2:
        return math.hypot(reference[1], reference[0])
    return image_diagonal(reference)


def rtre_values(moved, truth, reference):
    """Vectorised rTRE for matching ``(N, 2)`` point arrays."""
    d = np.linalg.norm(np.asarray(moved, float) - np.asarray(truth, float), axis=1)
    return d / _diagonal(reference)


def mmrtre(per_pair_medians):
    """Median over pairs of each pair's median rTRE."""
    return median(per_pair_medians)


def amrtre(per_pair_medians):
    """Mean over pairs of each pair's median rTRE."""
    v = [float(x) for x in per_pair_medians]
    if not v:
        raise EmptyInput("amrtre of an empty sequence")
    return math.fsum(v) / len(v)


@dataclass
class PairMetrics:
    pair_id: str
    rtre_values: list = field(default_factory=list)
    median_rtre: float = math.nan
    point_distances: list = field(default_factory=list)
    median_point_distance: float = math.nan
    median_point_distance_rel: float = math.nan
    keypoint_count: int = 0
    point_count: int = 0


@dataclass
class MethodSummary:
    method: str
    mm_rtre: float
    am_rtre: float
    median_point_distance: float
    per_pair: list


def point_eval(moving_points, reference_points, transform, reference):
    """Map moving evaluation points with ``transform`` and measure distances.

    Returns ``(distances, median_distance)`` in pixels.  Ten points are
    expected; other counts only log a warning.
    """
    mp = np.asarray(moving_points, dtype=np.float64).reshape(-1, 2)
    rp = np.asarray(reference_points, dtype=np.float64).reshape(-1, 2)
    if mp.shape != rp.shape:
        raise ValueError("moving and reference point counts differ")
    if len(mp) != 10:
        log.warning("point_eval: expected 10 evaluation points, got %d", len(mp))
    if len(mp) == 0:
        return [], math.nan
    moved = transform(mp)
    d = np.linalg.norm(moved - rp, axis=1)
    return d.tolist(), median(d)


def pair_metrics(pair_id, moving_points, reference_points, transform, reference,
                 keypoint_count=0):
    """rTRE and point distances for one registered pair."""
    dist, med = point_eval(moving_points, reference_points, transform, reference)
    diag = _diagonal(reference)
    r = [x / diag for x in dist]
    return PairMetrics(pair_id, r, median(r) if r else math.nan, dist, med,
                       med / diag if dist else math.nan, int(keypoint_count), len(dist))


def summarize_method(method, per_pair):
    """MMrTRE/AMrTRE over the pairs that produced a finite median rTRE."""
    meds = [p.median_rtre for p in per_pair if math.isfinite(p.median_rtre)]
    dists = [p.median_point_distance for p in per_pair
             if math.isfinite(p.median_point_distance)]
    return MethodSummary(method,
                         mmrtre(meds) if meds else math.nan,
                         amrtre(meds) if meds else math.nan,
                         median(dists) if dists else math.nan,
                         list(per_pair))


def keypoint_stats(results):
    """min / max / median / mean of the retained keypoint counts.

    Accepts registration results (anything with ``keypoint_count``) or ints.
    """
    counts = [int(getattr(r, "keypoint_count", r)) for r in results]
    if not counts:
        raise EmptyInput("no registration results")
    return {"min": min(counts), "max": max(counts), "median": median(counts),
            "mean": math.fsum(counts) / len(counts)}


def checkerboard(a, b, tile=64):
    """Alternate ``tile``-pixel squares from ``a`` (even cells) and ``b``."""
    same_shape(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    h, w = a.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    odd = ((xs // tile + ys // tile) % 2).astype(bool)
    if a.ndim == 3:
        odd = odd[..., None]
    return np.where(odd, b, a)


def overlay(a, b, alpha=0.5):
    same_shape(a, b)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return np.clip(alpha * np.asarray(a, float) + (1 - alpha) * np.asarray(b, float), 0.0, 1.0)


# --------------------------------------------------------------------------
# files


def read_landmarks(path):
    """Parse a ``label,x,y`` landmark file; returns ``(labels, (N, 2) array)``."""
    labels, pts = [], []
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != LANDMARK_HEADER:
        raise ParseError(f"missing header {LANDMARK_HEADER!r}", str(path), 1)
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [s.strip() for s in line.split(",")]
        if len(parts) != 3:
            raise ParseError(f"expected 'label,x,y', got {line!r}", str(path), lineno)
        try:
            x, y = float(parts[1]), float(parts[2])
        except ValueError:
            raise ParseError(f"non-numeric coordinate in {line!r}", str(path), lineno) from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ParseError("non-finite coordinate", str(path), lineno)
        labels.append(parts[0])
        pts.append((x, y))
    return labels, np.array(pts, dtype=np.float64).reshape(-1, 2)


def write_landmarks(path, labels, points):
    lines = [LANDMARK_HEADER]
    for lab, (x, y) in zip(labels, np.asarray(points, float)):
        lines.append(f"{lab},{float(x)!r},{float(y)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def pair_landmarks(moving_path, reference_path):
    """Load two landmark files and align them by label."""
    ml, mp = read_landmarks(moving_path)
    rl, rp = read_landmarks(reference_path)
    ref = dict(zip(rl, rp))
    missing = [lab for lab in ml if lab not in ref]
    if missing:
        raise ParseError(f"labels missing from reference file: {missing}", str(reference_path))
    return ml, mp, np.array([ref[lab] for lab in ml]).reshape(-1, 2)


def _num(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def metrics_rows(summary):
    """Per-pair rows followed by one summary row (``pair_id == 'ALL'``)."""
    rows = []
    for p in summary.per_pair:
        rows.append([summary.method, p.pair_id, _num(p.median_rtre), "", "",
                     _num(p.median_point_distance), _num(p.keypoint_count),
                     _num(p.median_point_distance_rel)])
    rels = [p.median_point_distance_rel for p in summary.per_pair
            if math.isfinite(p.median_point_distance_rel)]
    counts = [p.keypoint_count for p in summary.per_pair]
    rows.append([summary.method, "ALL", "", _num(summary.mm_rtre), _num(summary.am_rtre),
                 _num(summary.median_point_distance),
                 _num(median(counts)) if counts else "",
                 _num(median(rels)) if rels else ""])
    return rows


def write_metrics_csv(path, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def format_report(summaries):
    """Plain-text table of MMrTRE / AMrTRE / median distance per method."""
    out = [f"{'method':<24}{'pairs':>6}{'MMrTRE':>12}{'AMrTRE':>12}{'med.dist(px)':>14}"]
    for s in summaries:
        out.append(f"{s.method:<24}{len(s.per_pair):>6}{s.mm_rtre:>12.5f}"
                   f"{s.am_rtre:>12.5f}{s.median_point_distance:>14.3f}")
    return "\n".join(out) + "\n"
