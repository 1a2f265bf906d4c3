import json

import numpy as np
import pytest

from vdguide.cli import CSV_COLUMNS, EXIT_FAIL, EXIT_INVALID, EXIT_OK, main
from vdguide.io import read_depth

SMALL = ["--frames", "40", "--window", "20", "--overlap", "10", "--tracks-per-pair", "32"]


def _synth(root, *extra):
    assert main(["synth", "--out", str(root), *SMALL, *extra]) == EXIT_OK
    return root


def _config(tmp_path, preset):
    p = tmp_path / f"{preset}.ini"
    p.write_text(f"[pipeline]\npreset = {preset}\nwindow_size = 20\noverlap = 10\n")
    return p


def _run(bundle, out, cfg, *extra):
    return main(["run", "--bundle", str(bundle), "--out", str(out), "--config", str(cfg),
                 "--no-poses", *extra])


@pytest.fixture(scope="module")
def drifted(tmp_path_factory):
    return _synth(tmp_path_factory.mktemp("b") / "scene", "--corruption", "standard")


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_is_deterministic(tmp_path):
    a = _files(_synth(tmp_path / "a", "--corruption", "standard"))
    b = _files(_synth(tmp_path / "b", "--corruption", "standard"))
    assert a == b and len(a) > 40


def test_zero_corruption_matches_ground_truth(tmp_path):
    root = _synth(tmp_path / "z", "--corruption", "zero")
    assert (root / "corrupted" / "depth.dsyn").read_bytes() == (root / "depth.dsyn").read_bytes()


def test_run_on_ground_truth_is_fixed_point(tmp_path, drifted):
    assert _run(drifted, tmp_path / "o", _config(tmp_path, "baseline"), "--target", "gt") == EXIT_OK
    pred = read_depth(tmp_path / "o" / "prediction.dsyn")
    gt = read_depth(drifted / "depth.dsyn")
    np.testing.assert_array_equal(pred.values, gt.values)
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert json.loads(json.dumps(rep))["metrics"]["absrel_global"] < 1e-6
    assert len(rep["config_hash"]) == 64


def test_scale_only_beats_baseline(tmp_path, drifted):
    err = {}
    for name in ("baseline", "scale-only"):
        assert _run(drifted, tmp_path / name, _config(tmp_path, name)) == EXIT_OK
        err[name] = json.loads((tmp_path / name / "report.json").read_text())["metrics"]["absrel_global"]
    assert err["scale-only"] < 0.5 * err["baseline"]


def test_run_outputs_are_byte_identical(tmp_path, drifted):
    cfg = _config(tmp_path, "scale-only")
    for d in ("r1", "r2"):
        assert _run(drifted, tmp_path / d, cfg) == EXIT_OK
    for f in ("prediction.dsyn", "windows.dsyn"):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()


def test_eval_ground_truth_on_static_scene(tmp_path):
    root = _synth(tmp_path / "s", "--trajectory", "static")
    assert main(["eval", "--pred", str(root / "depth.dsyn"), "--bundle", str(root),
                 "--out", str(tmp_path / "e")]) == EXIT_OK
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())["metrics"]
    assert m["absrel_global"] == 0.0 and m["delta1_global"] == 1.0 and m["mfc"] == 0.0
    assert m["ate"] < 1e-6
    header = (tmp_path / "e" / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(CSV_COLUMNS)


def test_eval_sweep_rows(tmp_path, drifted):
    assert main(["eval", "--pred", str(drifted / "corrupted" / "depth.dsyn"), "--bundle", str(drifted),
                 "--out", str(tmp_path / "e"), "--sweep", "--no-poses"]) == EXIT_OK
    rows = (tmp_path / "e" / "metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + 3


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--instances", "1"]) == EXIT_OK
    assert main(["gradcheck", "--instances", "1", "--break-term", "smoothness"]) == EXIT_FAIL
    assert "smoothness" in capsys.readouterr().out


def test_missing_file_is_named(tmp_path, drifted, capsys):
    import shutil
    broken = tmp_path / "broken"
    shutil.copytree(drifted, broken)
    (broken / "corrupted" / "tracks.jsonl").unlink()
    (broken / "tracks.jsonl").unlink()
    assert _run(broken, tmp_path / "o", _config(tmp_path, "full")) == EXIT_INVALID
    assert "tracks.jsonl" in capsys.readouterr().err


def test_invalid_inputs_exit_2(tmp_path, drifted, monkeypatch):
    bad = tmp_path / "bad.ini"
    bad.write_text("[guidance]\nnonsense = 1\n")
    assert _run(drifted, tmp_path / "o", bad) == EXIT_INVALID
    assert main(["synth", "--out", str(tmp_path / "x"), "--frames", "1"]) == EXIT_INVALID
    with pytest.raises(SystemExit) as exc:
        main(["run", "--bundle", str(drifted)])
    assert exc.value.code == 2
    monkeypatch.setenv("DEPTHSYNC_THREADS", "lots")
    assert main(["config", "--dump"]) == EXIT_INVALID


def test_thread_limit_accepted(monkeypatch, capsys):
    monkeypatch.setenv("DEPTHSYNC_THREADS", "1")
    assert main(["config", "--list"]) == EXIT_OK
    assert "scale-only" in capsys.readouterr().out


def test_config_dump_round_trips(tmp_path, capsys):
    assert main(["config", "--dump", "--preset", "geometry-only"]) == EXIT_OK
    text = capsys.readouterr().out
    from vdguide.config import from_ini, preset
    assert from_ini(text) == preset("geometry-only")
