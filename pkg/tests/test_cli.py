import csv
import json

import numpy as np
import pytest

from histreg.cli import (PipelineConfig, cmd_eval_only, format_config, load_config, main,
                         method_keypoint_stats, parse_config, run_pipeline, synth_batch)
from histreg.core import AffineTransform2D, save_transform
from histreg.errors import ParseError


@pytest.fixture(scope="module")
def batch(tmp_path_factory):
    root = tmp_path_factory.mktemp("batch")
    cfg = synth_batch(root, count=3, seed=1, width=256, height=192, deform=2.0,
                      deform_scale=150.0, tile_size=128, overlap=64)
    return root, cfg


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("text,line", [
    ("seed = 1\nbogus = 2\n", 2),
    ("\n# c\nseed = x\n", 3),
    ("pair = only_one.png\n", 1),
    ("invert = maybe\n", 1),
    ("seed 3\n", 1),
])
def test_config_errors_name_line(text, line):
    with pytest.raises(ParseError) as err:
        parse_config(text, "x.cfg")
    assert err.value.line == line


def test_config_values(tmp_path):
    cfg = parse_config("method = reinhard  # trailing\ninvert = yes\nseed = 7\ndenoise_sigma = 0.5\nworking_size = 300\n"
                       "ransac_threshold = 2.5\npair = a/m.png, a/r.png\npair = b/m.png, b/r.png\n",
                       base=tmp_path)
    assert cfg.color_method == "reinhard" and cfg.invert_moving and cfg.seed == 7
    assert cfg.preprocess.denoise_sigma == 0.5 and cfg.registration.working_size == 300
    assert cfg.registration.ransac_threshold == 2.5
    assert [p.pair_id for p in cfg.pairs] == ["a", "b"]
    assert cfg.pairs[0].moving == str(tmp_path / "a/m.png")
    assert cfg.method_name == "reinhard+invert"
    with pytest.raises(ParseError):
        parse_config("method = nope\n")


def test_config_echo_roundtrip(batch):
    root, path = batch
    cfg = load_config(path)
    assert len(cfg.pairs) == 3 and cfg.out_dir == str(root / "results")
    again = parse_config(format_config(cfg))
    assert again.preprocess == cfg.preprocess
    assert again.pairs == cfg.pairs


def test_run_two_methods(batch, tmp_path):
    _, path = batch
    cfg = load_config(path)
    out = tmp_path / "run"
    for m in ("none", "reinhard"):
        manifest, summary = run_pipeline(PipelineConfig(**{**cfg.__dict__, "color_method": m,
                                                          "invert_moving": True,
                                                          "out_dir": str(out)}))
        assert manifest["succeeded"] == 3
        assert sorted(p["pair_id"] for p in manifest["pairs"]) == [p.pair_id for p in cfg.pairs]
        assert summary.mm_rtre < 0.02
    rows = read_csv(out / "metrics.csv")
    assert [r["method"] for r in rows if r["pair_id"] == "ALL"] == ["none+invert", "reinhard+invert"]
    pdir = out / "none+invert" / cfg.pairs[0].pair_id
    for f in ("registered.png", "checkerboard.png", "overlay.png", "transform.txt", "metrics.csv"):
        assert (pdir / f).exists()
    m = json.loads((out / "none+invert" / "manifest.json").read_text())
    assert m["method"] == "none+invert" and len(m["pairs"]) == 3

    # the stored transform re-scores to the same numbers
    pid = cfg.pairs[0]
    s = cmd_eval_only(pdir / "transform.txt", pid.moving_landmarks, pid.reference_landmarks,
                      pid.reference)
    row = next(r for r in rows if r["pair_id"] == pid.pair_id and r["method"] == "none+invert")
    assert s.per_pair[0].median_rtre == pytest.approx(float(row["median_rtre"]), rel=1e-12)

    st = method_keypoint_stats(out / "metrics.csv")
    assert set(st) == {"none+invert", "reinhard+invert"}
    assert main(["stats", "--out", str(out)]) == 0


def test_missing_file_marks_pair_failed(batch, tmp_path, capsys):
    root, _ = batch
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"out = o\ninvert = on\n"
                   f"pair = {root}/pair_000/moving.png, {root}/pair_000/reference.png, "
                   f"{root}/pair_000/moving_landmarks.txt, {root}/pair_000/reference_landmarks.txt\n"
                   f"pair = {root}/nothere/moving.png, {root}/pair_001/reference.png\n")
    assert main(["run", "--config", str(cfg)]) == 0
    m = json.loads((tmp_path / "o" / "none+invert" / "manifest.json").read_text())
    status = {p["pair_id"]: p["status"] for p in m["pairs"]}
    assert status == {"pair_000": "ok", "nothere": "failed"}
    rows = read_csv(tmp_path / "o" / "metrics.csv")
    failed = next(r for r in rows if r["pair_id"] == "nothere")
    assert failed["keypoint_count"] == "0" and failed["median_rtre"] == ""


def test_all_pairs_failing_exits_one(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("out = o\npair = a/m.png, a/r.png\n")
    assert main(["run", "--config", str(cfg)]) == 1


def test_bad_config_exits_two(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("wat = 1\n")
    assert main(["run", "--config", str(cfg)]) == 2
    assert ":1:" in capsys.readouterr().err


def test_eval_only(batch, tmp_path, capsys):
    root, _ = batch
    d = root / "pair_002"
    mlm, rlm, ref = d / "moving_landmarks.txt", d / "reference_landmarks.txt", d / "reference.png"
    s = cmd_eval_only(d / "truth.txt", mlm, rlm, ref)
    assert s.per_pair[0].median_rtre < 1e-9
    ident = tmp_path / "ident.txt"
    save_transform(ident, [(AffineTransform2D(), "truth")])
    s = cmd_eval_only(ident, mlm, mlm, ref)
    assert s.mm_rtre == 0 and s.per_pair[0].median_point_distance == 0
    assert main(["eval", str(ident), str(mlm), str(mlm), str(ref)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("method,pair_id") and len(out) == 3
    bad = tmp_path / "bad.txt"
    bad.write_text("# landmarks v1\nL01,1,2\nL02,oops,3\n")
    with pytest.raises(ParseError) as err:
        cmd_eval_only(ident, bad, mlm, ref)
    assert err.value.line == 3


def test_synth_subcommand(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--count", "2", "--width", "160",
                 "--height", "120", "--seed", "5"]) == 0
    cfg = load_config(tmp_path / "pairs.cfg")
    assert [p.pair_id for p in cfg.pairs] == ["pair_000", "pair_001"]
    assert (tmp_path / "pair_001" / "tiles").is_dir()
    a = (tmp_path / "pair_000" / "reference_landmarks.txt").read_text()
    main(["synth", "--out", str(tmp_path / "again"), "--count", "1", "--width", "160",
          "--height", "120", "--seed", "5"])
    assert (tmp_path / "again" / "pair_000" / "reference_landmarks.txt").read_text() == a
    assert np.isfinite(len(a))
