import csv
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

import tendon_forge
from tendon_forge.cli import THREADS_ENV, main, resolve_threads, InputError
from tendon_forge.fixtures import CLIP_SCALE, write_demo_inputs
from tendon_forge.limbdyn import demo_model_path
from tendon_forge.tables import read_csv, read_markers

DATA = Path(__file__).parent / "data"
SCHEMAS = Path(tendon_forge.__file__).parent / "data"
HORIZON = 60


def schema(name):
    return json.loads((SCHEMAS / f"{name}.schema.json").read_text())


def column(path, name):
    header, rows = read_csv(path)
    i = header.index(name)
    return np.array([float(r[i]) for r in rows])


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    return write_demo_inputs(tmp_path_factory.mktemp("inputs"), HORIZON)


def run(*argv):
    return main([str(a) for a in argv])


# -- extract-loa --------------------------------------------------------------------


def test_extract_loa_golden(inputs, tmp_path, capsys):
    code = run("extract-loa", "--muscle", inputs["muscle"], "--bones-dir", inputs["bones"], "--out", tmp_path)
    assert code == 0
    out = (tmp_path / "cylinder_muscle.tendon.json").read_bytes()
    assert out == (DATA / "cylinder_muscle.tendon.json").read_bytes()
    assert "cylinder_muscle: 5 sites" in capsys.readouterr().out
    jsonschema.validate(json.loads(out), schema("tendon"))


def test_extract_loa_missing_mesh(tmp_path, capsys, inputs):
    code = run("extract-loa", "--muscle", tmp_path / "nope.obj", "--bones-dir", inputs["bones"], "--out", tmp_path)
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_extract_loa_no_threshold_keeps_every_slice(inputs, tmp_path, capsys):
    code = run("extract-loa", "--muscle", inputs["muscle"], "--bones-dir", inputs["bones"],
               "--max-dist", 0, "--min-dist-new-bone", 0, "--out", tmp_path)
    assert code == 0
    doc = json.loads((tmp_path / "cylinder_muscle.tendon.json").read_text())
    assert len(doc["sites"]) == doc["metadata"]["n_slices"] == 30


def test_extract_loa_config_and_flag_precedence(inputs, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"muscle": str(inputs["muscle"]), "bones_dir": str(inputs["bones"]),
                               "max_dist": 0.0, "min_dist_new_bone": 0.0, "out": str(tmp_path / "a")}))
    assert run("extract-loa", "--config", cfg) == 0
    assert len(json.loads((tmp_path / "a" / "cylinder_muscle.tendon.json").read_text())["sites"]) == 30
    assert run("extract-loa", "--config", cfg, "--max-dist", 0.1, "--min-dist-new-bone", 0.05,
               "--out", tmp_path / "b") == 0
    assert len(json.loads((tmp_path / "b" / "cylinder_muscle.tendon.json").read_text())["sites"]) == 5
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": "red"}))
    assert run("extract-loa", "--config", bad) == 2


# -- retarget -----------------------------------------------------------------------


def test_retarget_recovers_fixture_scale(inputs, tmp_path):
    assert run("retarget", "--model", inputs["model"], "--clip", inputs["clip"], "--out", tmp_path) == 0
    meta = json.loads((tmp_path / "retarget.json").read_text())
    jsonschema.validate(meta, schema("retarget"))
    assert abs(meta["scale"] - CLIP_SCALE) < 1e-4
    header, rows = read_csv(tmp_path / "joint_angles.csv")
    assert header == ["frame", "q0", "q1", "q2", "root_offset"] and len(rows) == 40


def test_retarget_empty_clip(inputs, tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("frame,marker,x,y,z\n")
    assert run("retarget", "--model", inputs["model"], "--clip", empty, "--out", tmp_path) == 2
    assert "no frames" in capsys.readouterr().err


def test_retarget_parallel_matches_sequential(inputs, tmp_path):
    common = ["retarget", "--model", inputs["model"], "--clip", inputs["clip"], "--warm-start", "previous-iteration"]
    assert run(*common, "--out", tmp_path / "seq") == 0
    assert run(*common, "--parallel", "--threads", 4, "--out", tmp_path / "par") == 0
    for name in ("joint_angles.csv", "retarget.json"):
        a = (tmp_path / "seq" / name).read_bytes()
        b = (tmp_path / "par" / name).read_bytes()
        assert a == b


def test_threads_resolution(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert resolve_threads(None) == 1
    monkeypatch.setenv(THREADS_ENV, "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(InputError):
        resolve_threads(None)


# -- track --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tracked(inputs, tmp_path_factory):
    out = tmp_path_factory.mktemp("track")
    assert main(["track", "--problem", str(inputs["problem"]), "--mode", "smoothed", "--out", str(out)]) == 0
    return out


def test_track_outputs(tracked, inputs):
    cost = column(tracked / "cost.csv", "cost")
    assert len(cost) >= 2 and np.all(np.diff(cost) < 0)
    header, rows = read_csv(tracked / "trajectory.csv")
    assert header[:4] == ["t", "q0", "q1", "q2"] and header[-1] == "u5"
    assert len(rows) == HORIZON + 1 and rows[-1][-1] == ""
    err = column(tracked / "kinematic_error.csv", "error")
    assert len(err) == HORIZON + 1 and err.max() < 0.05 * 0.52
    terms = read_csv(tracked / "cost_terms.csv")[0]
    assert terms == ["step", "t", "joint_velocity", "control", "marker_pos", "marker_vel", "total"]
    total = column(tracked / "cost_terms.csv", "total").sum()
    assert total == pytest.approx(cost[-1], rel=1e-12)
    t, names, pos = read_markers(tracked / "markers.csv")
    assert pos.shape == (HORIZON + 1, 6, 2)


def test_track_deterministic(tracked, inputs, tmp_path):
    assert run("track", "--problem", inputs["problem"], "--mode", "smoothed", "--out", tmp_path) == 0
    for f in ("trajectory.csv", "cost.csv", "cost_terms.csv", "kinematic_error.csv", "markers.csv"):
        assert (tmp_path / f).read_bytes() == (tracked / f).read_bytes()


def test_track_zero_horizon(inputs, tmp_path, capsys):
    assert run("track", "--problem", inputs["problem"], "--horizon", 0, "--out", tmp_path) == 2
    assert "horizon" in capsys.readouterr().err


def test_track_divergence_exit_code(inputs, tmp_path):
    assert run("track", "--problem", inputs["problem"], "--dt", 10.0, "--out", tmp_path) == 3


def test_track_switched_and_weights(inputs, tmp_path):
    assert run("track", "--problem", inputs["problem"], "--mode", "switched", "--horizon", 20,
               "--weights", 0.01, 0.1, 2.0, 0.1, "--max-iter", 5, "--out", tmp_path) == 0
    assert len(read_csv(tmp_path / "trajectory.csv")[1]) == 21


def test_track_receding(inputs, tmp_path):
    assert run("track", "--problem", inputs["problem"], "--horizon", 30, "--receding", 10,
               "--max-iter", 5, "--out", tmp_path) == 0


def test_track_missing_problem(tmp_path):
    assert run("track", "--out", tmp_path) == 2


# -- metrics ------------------------------------------------------------------------


def test_metrics_self_is_zero(inputs, tmp_path):
    out = tmp_path / "e.csv"
    ref = inputs["reference_markers"]
    assert run("metrics", "--sim", ref, "--ref", ref, "--out", out) == 0
    assert np.all(column(out, "error") == 0)


def test_metrics_offset_fixture(inputs, tmp_path):
    out = tmp_path / "e.csv"
    assert run("metrics", "--sim", inputs["offset_sim"], "--ref", inputs["offset_ref"], "--out", out) == 0
    assert np.all(column(out, "error") == 2.5)


def test_metrics_mismatched_markers(inputs, tmp_path):
    out = tmp_path / "e.csv"
    assert run("metrics", "--sim", inputs["offset_sim"], "--ref", inputs["reference_markers"], "--out", out) == 2


def test_metrics_reordered_columns(inputs, tmp_path):
    with open(inputs["offset_ref"]) as fh:
        rows = list(csv.reader(fh))
    order = [0, 3, 4, 1, 2]
    swapped = tmp_path / "swapped.csv"
    with open(swapped, "w", newline="") as fh:
        csv.writer(fh).writerows([[r[i] for i in order] for r in rows])
    out = tmp_path / "e.csv"
    assert run("metrics", "--sim", inputs["offset_sim"], "--ref", swapped, "--out", out) == 0
    assert np.all(column(out, "error") == 2.5)


# -- fixtures and demo ----------------------------------------------------------------


def test_input_files_match_schemas(inputs):
    jsonschema.validate(json.loads(Path(inputs["problem"]).read_text()), schema("problem"))
    jsonschema.validate(json.loads((Path(inputs["problem"]).parent / "reference.json").read_text()),
                        schema("reference"))
    jsonschema.validate(json.loads(Path(inputs["model"]).read_text()), schema("model"))
    jsonschema.validate(json.loads(demo_model_path().read_text()), schema("model"))


def test_demo_end_to_end(tmp_path, capsys):
    assert run("demo", "--out", tmp_path, "--horizon", 40, "--max-iter", 10) == 0
    for f in ("loa/cylinder_muscle.tendon.json", "retarget/retarget.json", "track/trajectory.csv",
              "track/metrics.csv"):
        assert (tmp_path / f).exists()
    assert "scale 1.25" in capsys.readouterr().out


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert tendon_forge.__version__ in capsys.readouterr().out
