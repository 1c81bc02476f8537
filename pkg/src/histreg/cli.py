"""Batch registration pipeline and the ``histreg`` command line.

Subcommands
-----------
run    register every pair listed in a config file and score it
eval   score an existing transform file against landmark files
synth  write a batch of synthetic pairs plus a ready-to-run config
stats  keypoint-count statistics per method from a metrics CSV

Config file
-----------
Flat ``key = value`` lines; ``#`` starts a comment.  Relative paths are
resolved against the config file's directory.  ``pair`` may repeat::

    out = runs/demo
    method = reinhard
    invert_moving = true
    seed = 0
    pair = a/moving.png, a/reference.png, a/moving_landmarks.txt, a/reference_landmarks.txt, a/tiles

Pair fields are ``moving, reference[, moving_landmarks, reference_landmarks[, tile_dir]]``.
Any :class:`PreprocessConfig` or :class:`RegistrationConfig` field name is
accepted as a key.  Command-line flags override the file.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import load_image, load_transforms, save_image
from .errors import HistregError, ParseError, RegistrationFailed
from .evaluation import (CSV_COLUMNS, checkerboard, keypoint_stats, metrics_rows,
                         overlay, pair_landmarks, pair_metrics, summarize_method,
                         write_metrics_csv, PairMetrics, format_report)
from .preprocess import (BRIGHT_FOREGROUND, DARK_FOREGROUND, PreprocessConfig,
                         contrast_stretch, denoise, invert, otsu_mask)
from .registration import RegistrationConfig, format_result, parse_result, register_pair
from .stain import lab_stats, macenko_estimate, reinhard_transfer, stain_normalize, vahadane_estimate
from .synth import SynthSpec, generate_pair, random_affine, write_pair
from .tiles import TileGrid, apply_external_tiles, load_grid

log = logging.getLogger("histreg")

METHODS = ("none", "reinhard", "macenko", "vahadane", "externalTiles")
METRICS_FILE = "metrics.csv"


@dataclass(frozen=True)
class PairSpec:
    pair_id: str
    moving: str
    reference: str
    moving_landmarks: str | None = None
    reference_landmarks: str | None = None
    tile_dir: str | None = None


@dataclass(frozen=True)
class PipelineConfig:
    pairs: tuple = ()
    color_method: str = "none"
    invert_moving: bool = False
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    out_dir: str = "histreg_out"
    seed: int = 0
    jobs: int = 1
    moving_mask_polarity: str = "auto"

    def __post_init__(self):
        if self.color_method not in METHODS:
            raise ValueError(f"unknown color method {self.color_method!r}; choose from {METHODS}")
        if self.moving_mask_polarity not in ("auto", DARK_FOREGROUND, BRIGHT_FOREGROUND):
            raise ValueError(f"unknown moving_mask_polarity {self.moving_mask_polarity!r}")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    @property
    def method_name(self):
        return self.color_method + ("+invert" if self.invert_moving else "")

    def moving_polarity(self):
        """Tissue polarity of the moving image after optional inversion.

        ``auto`` assumes bright tissue on a dark background (the opposite of
        the reference), which inversion flips back.
        """
        if self.moving_mask_polarity != "auto":
            return self.moving_mask_polarity
        ref = self.preprocess.mask_polarity
        other = BRIGHT_FOREGROUND if ref == DARK_FOREGROUND else DARK_FOREGROUND
        return ref if self.invert_moving else other


# --------------------------------------------------------------------------
# config file


def _bool(text, path, lineno):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ParseError(f"expected a boolean, got {text!r}", path, lineno)


def _typed(cls, key, value, path, lineno):
    kind = {f.name: f.type for f in fields(cls)}[key]
    try:
        if kind in ("int", int):
            return int(value)
        if kind in ("float", float):
            return float(value)
        if kind in ("bool", bool):
            return _bool(value, path, lineno)
        return value
    except ValueError:
        raise ParseError(f"bad value for {key}: {value!r}", path, lineno) from None


def _pair_ids(pairs):
    names = [Path(p[0]).parent.name for p in pairs]
    if len(set(names)) == len(names) and all(names):
        return names
    return [f"pair_{i:03d}" for i in range(len(pairs))]


def parse_config(text, path=None, base=None):
    """Parse config text into a :class:`PipelineConfig`.

    Raises :class:`ParseError` naming the offending line.
    """
    base = Path(base) if base is not None else Path(".")
    pre_keys = {f.name for f in fields(PreprocessConfig)}
    reg_keys = {f.name for f in fields(RegistrationConfig)}
    top, pre, reg, pairs = {}, {}, {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "pair":
            parts = [s.strip() for s in value.split(",")]
            if len(parts) not in (2, 4, 5) or not all(parts):
                raise ParseError("pair needs moving, reference[, moving_lm, reference_lm[, tile_dir]]",
                                 path, lineno)
            pairs.append([str(base / s) for s in parts])
        elif key in ("method", "color_method"):
            top["color_method"] = value
        elif key in ("invert", "invert_moving"):
            top["invert_moving"] = _bool(value, path, lineno)
        elif key in ("seed", "jobs"):
            top[key] = _typed(PipelineConfig, key, value, path, lineno)
        elif key == "out":
            top["out_dir"] = str(base / value)
        elif key == "moving_mask_polarity":
            top[key] = value
        elif key in pre_keys:
            pre[key] = _typed(PreprocessConfig, key, value, path, lineno)
        elif key in reg_keys:
            reg[key] = _typed(RegistrationConfig, key, value, path, lineno)
        else:
            raise ParseError(f"unknown key {key!r}", path, lineno)
    specs = tuple(PairSpec(pid, *p) for pid, p in zip(_pair_ids(pairs), pairs))
    try:
        return PipelineConfig(pairs=specs, preprocess=PreprocessConfig(**pre),
                              registration=RegistrationConfig(**reg), **top)
    except ValueError as exc:
        raise ParseError(str(exc), path) from None


def load_config(path):
    path = Path(path)
    return parse_config(path.read_text(), str(path), path.parent)


def format_config(cfg):
    """Config echo in the same ``key = value`` syntax (paths as given)."""
    lines = [f"method = {cfg.color_method}", f"invert_moving = {str(cfg.invert_moving).lower()}",
             f"seed = {cfg.seed}", f"moving_mask_polarity = {cfg.moving_mask_polarity}"]
    for k, v in asdict(cfg.preprocess).items():
        lines.append(f"{k} = {v}")
    for k, v in asdict(cfg.registration).items():
        if k != "seed":
            lines.append(f"{k} = {v}")
    for p in cfg.pairs:
        parts = [p.moving, p.reference, p.moving_landmarks, p.reference_landmarks, p.tile_dir]
        lines.append("pair = " + ", ".join(s for s in parts if s))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# pipeline


def _rgb(img):
    return img if img.ndim == 3 else np.repeat(img[..., None], 3, axis=2)


def _prepare(img, cfg, flip):
    out = contrast_stretch(img, cfg)
    if flip:
        out = invert(out)
    return denoise(out, cfg.denoise_sigma)


def color_transform(moving, reference, moving_mask, reference_mask, method, tile_dir=None):
    """Bring ``moving`` towards the appearance of ``reference``."""
    if method == "none":
        return moving
    if method == "externalTiles":
        if tile_dir is None:
            raise ParseError("externalTiles needs a tile_dir field on the pair line")
        grid = load_grid(tile_dir)
        return apply_external_tiles(moving, grid, tile_dir)
    m, r = _rgb(moving), _rgb(reference)
    if method == "reinhard":
        return reinhard_transfer(m, moving_mask, lab_stats(r, reference_mask))
    estimate = macenko_estimate if method == "macenko" else vahadane_estimate
    return stain_normalize(m, estimate(m, moving_mask), estimate(r, reference_mask))


def _match_channels(img, like):
    if img.ndim == like.ndim:
        return img
    return _rgb(img) if like.ndim == 3 else img.mean(axis=2)


def run_pair(pair, cfg, out_dir):
    """Process one pair; returns a manifest record and its :class:`PairMetrics`."""
    record = {"pair_id": pair.pair_id, "moving": pair.moving, "reference": pair.reference,
              "status": "failed"}
    metrics = PairMetrics(pair.pair_id)
    try:
        moving_raw = load_image(pair.moving)
        reference_raw = load_image(pair.reference)
        moving = _prepare(moving_raw, cfg.preprocess, cfg.invert_moving)
        reference = _prepare(reference_raw, cfg.preprocess, False)
        reference_mask = otsu_mask(reference, cfg.preprocess.mask_polarity)
        moving_mask = otsu_mask(moving, cfg.moving_polarity())
        moving = color_transform(moving, reference, moving_mask, reference_mask,
                                 cfg.color_method, pair.tile_dir)
        reg_cfg = replace(cfg.registration, seed=cfg.seed)
        result = register_pair(moving, reference, reg_cfg, reference_mask)
        pdir = Path(out_dir) / pair.pair_id
        pdir.mkdir(parents=True, exist_ok=True)
        h, w = reference_raw.shape[:2]
        registered = _match_channels(result.warp(moving_raw, w, h), reference_raw)
        save_image(pdir / "registered.png", registered)
        save_image(pdir / "checkerboard.png", checkerboard(reference_raw, registered))
        save_image(pdir / "overlay.png", overlay(reference_raw, registered))
        (pdir / "transform.txt").write_text(format_result(result))
        metrics.keypoint_count = result.keypoint_count
        if pair.moving_landmarks and pair.reference_landmarks:
            _, mp, rp = pair_landmarks(pair.moving_landmarks, pair.reference_landmarks)
            metrics = pair_metrics(pair.pair_id, mp, rp, result.forward, (h, w),
                                   result.keypoint_count)
        write_metrics_csv(pdir / "metrics.csv", metrics_rows(summarize_method(cfg.method_name, [metrics])))
        record.update(status="ok", stage_used=result.stage_used,
                      keypoint_count=result.keypoint_count)
    except RegistrationFailed as exc:
        record.update(status="failed", reason=str(exc), diagnostics=exc.diagnostics)
    except (HistregError, OSError, ValueError) as exc:
        record.update(status="failed", reason=f"{type(exc).__name__}: {exc}")
    if record["status"] != "ok":
        # a failed pair contributes no metrics and zero retained keypoints
        metrics = PairMetrics(pair.pair_id)
    return record, metrics


def _run_pair_args(args):
    return run_pair(*args)


def _merge_csv(path, method, rows):
    """Replace ``method``'s rows in the summary CSV, keeping other methods."""
    kept = []
    if path.exists():
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header == CSV_COLUMNS:
                kept = [r for r in reader if r and r[0] != method]
    write_metrics_csv(path, kept + rows)


def run_pipeline(cfg):
    """Run every configured pair and write outputs under ``cfg.out_dir``.

    Returns ``(manifest, summary)``.  Per-pair failures are recorded in the
    manifest and never abort the batch.  Outputs:

    * ``<out>/<method>/<pair_id>/`` registered, checkerboard and overlay
      images, ``transform.txt`` and the pair's ``metrics.csv``
    * ``<out>/<method>/manifest.json``
    * ``<out>/metrics.csv`` with the rows of every method run so far
    """
    out = Path(cfg.out_dir)
    mdir = out / cfg.method_name
    mdir.mkdir(parents=True, exist_ok=True)
    work = [(p, cfg, mdir) for p in cfg.pairs]
    if cfg.jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_pair_args, work))
    else:
        results = [run_pair(*w) for w in work]
    records = [r for r, _ in results]
    summary = summarize_method(cfg.method_name, [m for _, m in results])
    _merge_csv(out / METRICS_FILE, cfg.method_name, metrics_rows(summary))
    manifest = {"method": cfg.method_name, "seed": cfg.seed,
                "config": format_config(cfg).splitlines(),
                "succeeded": sum(r["status"] == "ok" for r in records),
                "pairs": records}
    (mdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for r in records:
        if r["status"] != "ok":
            log.warning("%s %s failed: %s", cfg.method_name, r["pair_id"], r["reason"])
    return manifest, summary


# --------------------------------------------------------------------------
# eval-only


def load_registration(path):
    """A moving -> reference callable from a transform file.

    Files written by the pipeline (with a ``rigid`` block) give the composed
    registration; otherwise the blocks are applied in file order.
    """
    blocks = load_transforms(path)
    if any(role == "rigid" for t, role, _ in blocks if t is not None):
        return parse_result(Path(path).read_text(), str(path)).forward
    chain = [t for t, _, _ in blocks if t is not None]
    if not chain:
        raise ParseError("no transform blocks", str(path))

    def apply(p):
        for t in chain:
            p = t(p)
        return p
    return apply


def cmd_eval_only(transform_file, moving_landmarks, reference_landmarks, reference_image,
                  out_csv=None, method="eval"):
    """Score a stored transform against landmark files without re-registering."""
    transform = load_registration(transform_file)
    _, mp, rp = pair_landmarks(moving_landmarks, reference_landmarks)
    ref = load_image(reference_image)
    pid = Path(transform_file).parent.name or "pair"
    metrics = pair_metrics(pid, mp, rp, transform, ref.shape[:2])
    summary = summarize_method(method, [metrics])
    if out_csv is not None:
        write_metrics_csv(out_csv, metrics_rows(summary))
    return summary


# --------------------------------------------------------------------------
# synth


def synth_batch(out_dir, count=10, seed=0, width=1200, height=700, deform=8.0,
                deform_scale=300.0, modality_gap=True, tile_size=512, overlap=256):
    """Write ``count`` synthetic pairs and a ``pairs.cfg`` listing them."""
    out = Path(out_dir)
    lines = ["out = results", f"seed = {seed}"]
    for i in range(count):
        rng = np.random.default_rng(seed * 1000 + i)
        aff = random_affine(rng, center=(width / 2, height / 2))
        spec = SynthSpec(seed=seed * 1000 + i, width=width, height=height, affine=aff,
                         deform_amplitude=deform, deform_scale=deform_scale,
                         modality_gap=modality_gap)
        name = f"pair_{i:03d}"
        grid = TileGrid(width, height, min(tile_size, max(width, height)),
                        min(overlap, min(tile_size, max(width, height)) - 1))
        write_pair(out / name, generate_pair(spec), tile_grid=grid)
        lines.append(f"pair = {name}/moving.png, {name}/reference.png, "
                     f"{name}/moving_landmarks.txt, {name}/reference_landmarks.txt, {name}/tiles")
    (out / "pairs.cfg").write_text("\n".join(lines) + "\n")
    return out / "pairs.cfg"


# --------------------------------------------------------------------------
# stats


def method_keypoint_stats(csv_path):
    """``{method: keypoint_stats}`` over the per-pair rows of a metrics CSV."""
    counts = {}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["pair_id"] == "ALL":
                continue
            counts.setdefault(row["method"], []).append(int(row["keypoint_count"] or 0))
    return {m: keypoint_stats(c) for m, c in counts.items()}


# --------------------------------------------------------------------------
# command line


def _methods(arg):
    if arg == "all":
        return list(METHODS)
    out = [m.strip() for m in arg.split(",")]
    bad = [m for m in out if m not in METHODS]
    if bad:
        raise ValueError(f"unknown method(s) {bad}; choose from {METHODS}")
    return out


def _inversions(arg, default):
    if arg is None:
        return [default]
    return {"on": [True], "off": [False], "both": [False, True]}[arg]


def build_parser():
    ap = argparse.ArgumentParser(prog="histreg", description="Histology image registration pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="register and score the pairs of a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--method", help="color method, comma list, or 'all'")
    run.add_argument("--invert", nargs="?", const="on", choices=["on", "off", "both"],
                     help="invert the moving image (default from config)")
    run.add_argument("--seed", type=int)
    run.add_argument("--jobs", type=int)
    run.add_argument("--out")

    ev = sub.add_parser("eval", help="score a transform file against landmarks")
    ev.add_argument("transform")
    ev.add_argument("moving_landmarks")
    ev.add_argument("reference_landmarks")
    ev.add_argument("reference_image")
    ev.add_argument("--out", help="metrics CSV path (default: print)")
    ev.add_argument("--method", default="eval")

    sy = sub.add_parser("synth", help="write synthetic pairs and a config")
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--count", type=int, default=10)
    sy.add_argument("--width", type=int, default=1200)
    sy.add_argument("--height", type=int, default=700)
    sy.add_argument("--deform", type=float, default=8.0)
    sy.add_argument("--no-gap", action="store_true", help="same appearance in both images")

    st = sub.add_parser("stats", help="keypoint statistics per method")
    st.add_argument("--out", required=True, help="run directory or metrics CSV")
    st.add_argument("--method")
    return ap


def _cmd_run(args):
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.jobs is not None:
        over["jobs"] = args.jobs
    if args.out is not None:
        over["out_dir"] = args.out
    cfg = replace(cfg, **over)
    methods = _methods(args.method) if args.method else [cfg.color_method]
    ok = 0
    for inv in _inversions(args.invert, cfg.invert_moving):
        for m in methods:
            c = replace(cfg, color_method=m, invert_moving=inv)
            manifest, summary = run_pipeline(c)
            ok += manifest["succeeded"]
            print(f"{c.method_name}: {manifest['succeeded']}/{len(c.pairs)} pairs ok, "
                  f"MMrTRE {summary.mm_rtre:.5f}, AMrTRE {summary.am_rtre:.5f}")
    print(f"metrics: {Path(cfg.out_dir) / METRICS_FILE}")
    return 0 if ok > 0 else 1


def _cmd_eval(args):
    summary = cmd_eval_only(args.transform, args.moving_landmarks, args.reference_landmarks,
                            args.reference_image, args.out, args.method)
    if args.out is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(metrics_rows(summary))
    else:
        sys.stdout.write(format_report([summary]))
    return 0


def _cmd_synth(args):
    cfg = synth_batch(args.out, args.count, args.seed, args.width, args.height,
                      args.deform, modality_gap=not args.no_gap)
    print(f"wrote {args.count} pairs; config: {cfg}")
    return 0


def _cmd_stats(args):
    path = Path(args.out)
    if path.is_dir():
        path = path / METRICS_FILE
    stats = method_keypoint_stats(path)
    if args.method:
        stats = {args.method: stats[args.method]}
    print(f"{'method':<24}{'min':>8}{'max':>8}{'median':>10}{'mean':>10}")
    for m, s in stats.items():
        print(f"{m:<24}{s['min']:>8}{s['max']:>8}{s['median']:>10g}{s['mean']:>10.2f}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": _cmd_run, "eval": _cmd_eval, "synth": _cmd_synth, "stats": _cmd_stats}
    try:
        return handlers[args.command](args)
    except (ParseError, ValueError, KeyError) as exc:
        print(f"histreg: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"histreg: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
