import json
import subprocess
import sys

import pytest

from ffpverify.cli import EXIT_INTERNAL, EXIT_MISSING, EXIT_OK, EXIT_VALIDATION, main

SPEC = {"rows": 1, "cols": 2, "width": 128, "height": 128, "focal": 130.0, "distance": 120.0, "demolished": {"b01": "rubble"}}


@pytest.fixture
def dataset(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SPEC))
    root = tmp_path / "data"
    assert main(["synth", str(root), "--spec", str(spec)]) == EXIT_OK
    return root


def test_synth_then_run(dataset, capsys):
    capsys.readouterr()
    assert main(["run", "--config", str(dataset / "config.json"), "--classifier", "oracle"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "3d flagged: b01" in out
    assert (dataset / "out" / "report.txt").read_text() == out


def test_stages_one_by_one(dataset, capsys):
    cfg = str(dataset / "config.json")
    for stage in ("render", "extrude", "extract"):
        assert main([stage, "--config", cfg, "--jobs", "2"]) == EXIT_OK
    assert main(["classify", "--config", cfg, "--classifier", "oracle"]) == EXIT_OK
    assert main(["verify", "--config", cfg, "--mode", "nadir"]) == EXIT_OK
    assert main(["report", "--config", cfg]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("mode") and "nadir" in out and "3d" not in out.split("\n", 2)[1]


def test_missing_mesh_exit_code(dataset, capsys):
    (dataset / "scene.obj").unlink()
    assert main(["render", "--config", str(dataset / "config.json")]) == EXIT_MISSING
    assert str(dataset / "scene.obj") in capsys.readouterr().err


def test_missing_config_exit_code(tmp_path, capsys):
    assert main(["render", "--config", str(tmp_path / "nope.json")]) == EXIT_MISSING
    assert "nope.json" in capsys.readouterr().err


def test_stage_out_of_order_exit_code(dataset, capsys):
    assert main(["verify", "--config", str(dataset / "config.json")]) == EXIT_MISSING
    err = capsys.readouterr().err
    assert "extrude" in err and "lod1.json" in err


@pytest.mark.parametrize("cfg", [{"gsd": -1}, {"unknown_key": 1}, [1, 2]])
def test_invalid_config_exit_code(tmp_path, cfg, capsys):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg))
    assert main(["render", "--config", str(p)]) == EXIT_VALIDATION
    assert capsys.readouterr().err.startswith("error:")


def test_malformed_json_exit_code(tmp_path):
    p = tmp_path / "config.json"
    p.write_text("{not json")
    assert main(["render", "--config", str(p)]) == EXIT_VALIDATION


def test_bad_jobs(dataset):
    assert main(["render", "--config", str(dataset / "config.json"), "--jobs", "0"]) == EXIT_VALIDATION


def test_bad_synth_spec(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"demolished": {"b42": "slab"}}))
    assert main(["synth", str(tmp_path / "d"), "--spec", str(spec)]) == EXIT_VALIDATION


def test_internal_error_exit_code(monkeypatch, dataset, capsys):
    from ffpverify import pipeline

    def boom(*a, **k):
        raise RuntimeError("kaput")

    monkeypatch.setattr(pipeline, "cmd_render", boom)
    assert main(["render", "--config", str(dataset / "config.json")]) == EXIT_INTERNAL
    assert "kaput" in capsys.readouterr().err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "ffpverify.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("render", "extrude", "extract", "train", "classify", "verify", "report", "run", "synth"):
        assert cmd in r.stdout
