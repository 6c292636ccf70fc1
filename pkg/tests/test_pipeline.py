import csv
import json

import numpy as np
import pytest

from ffpverify import io
from ffpverify.camera import load_poses
from ffpverify.errors import MissingArtifact, ValidationError
from ffpverify.pipeline import (
    PipelineConfig,
    cmd_classify,
    cmd_extract,
    cmd_extrude,
    cmd_render,
    cmd_verify,
    run_all,
)
from ffpverify.synth import SyntheticSceneSpec, write_dataset

SMALL = dict(rows=1, cols=2, width=192, height=192, focal=200.0, distance=120.0, demolished={"b01": "rubble"})


def small_dataset(root, **kw):
    write_dataset(root, SyntheticSceneSpec(**{**SMALL, **kw}))
    return PipelineConfig.load(root / "config.json", classifier="oracle")


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_render_writes_one_pfm_per_view(oracle_run):
    root, cfg, _ = oracle_run
    cams = load_poses(root / "poses.json")
    index = io.read_json(cfg.out / "depth" / "index.json")["views"]
    assert [v["view_id"] for v in index] == [c.view_id for c in cams]
    assert len(cams) == 5
    for cam in cams:
        d = io.read_pfm(cfg.out / "depth" / f"{cam.view_id}.pfm")
        assert d.shape == (cam.height, cam.width)
        assert np.all((d >= -1) & (d <= 1))


def test_oracle_run_flags_exactly_the_demolished(oracle_run):
    _, cfg, report = oracle_run
    rows = {r["building_id"]: r["decision"] for r in csv.DictReader(open(cfg.out / "verdicts_3d.csv"))}
    assert len(rows) == 12
    assert sorted(b for b, d in rows.items() if d != "unchanged") == ["b05", "b06"]
    assert "3d flagged: b05 b06" in report


def test_slab_only_seen_obliquely(oracle_run):
    _, cfg, _ = oracle_run
    summ = io.read_json(cfg.out / "summary.json")
    assert summ["3d"]["C_P"] == 100.0
    assert summ["nadir"]["FN"] == 1
    flagged = {r["building_id"] for r in csv.DictReader(open(cfg.out / "verdicts_nadir.csv")) if r["decision"] != "unchanged"}
    assert "b06" not in flagged


def test_report_rows_trace_back_to_files(oracle_run):
    _, cfg, _ = oracle_run
    manifest = io.read_json(cfg.out / "patches" / "manifest.json")["samples"]
    by_id = {s["sample_id"]: s for s in manifest}
    for mode in ("3d", "nadir", "oblique"):
        for row in csv.DictReader(open(cfg.out / f"verdicts_{mode}.csv")):
            sid = row["worst_patch_id"]
            assert sid in by_id, sid
            s = by_id[sid]
            assert s["building_id"] == row["building_id"]
            assert s["face_id"].startswith(row["building_id"] + "/")
            assert (cfg.dataset_root / cfg.images / f"{s['view_id']}.png").exists()
            for f in s["files"].values():
                assert (cfg.out / "patches" / f).exists()


def test_manifest_rows_have_required_fields(oracle_run):
    _, cfg, _ = oracle_run
    rows = io.read_json(cfg.out / "patches" / "manifest.json")["samples"]
    assert rows
    for r in rows:
        for k in ("building_id", "face_id", "view_id", "kind", "projected_area_px2", "visible_area_px2", "bbox"):
            assert k in r
        assert 0 < r["visible_area_px2"] <= r["projected_area_px2"] + 1e-9


def test_rerun_without_force_is_skipped(oracle_run):
    root, cfg, report = oracle_run
    before = tree_bytes(cfg.out)
    assert cmd_render(cfg) is False
    assert cmd_extract(cfg) is False
    assert run_all(cfg) == report
    assert tree_bytes(cfg.out) == before


def test_stage_reruns_when_output_touched(tmp_path):
    cfg = small_dataset(tmp_path)
    run_all(cfg)
    p = cfg.out / "predictions.csv"
    good = p.read_bytes()
    p.write_text("garbage")
    assert cmd_classify(cfg) is True
    assert p.read_bytes() == good


def test_forced_rerun_is_byte_identical(tmp_path):
    cfg = small_dataset(tmp_path)
    run_all(cfg)
    first = tree_bytes(cfg.out)
    run_all(cfg, force=True)
    assert tree_bytes(cfg.out) == first


def test_all_unchanged_scene(tmp_path):
    cfg = small_dataset(tmp_path, demolished={})
    run_all(cfg)
    summ = io.read_json(cfg.out / "summary.json")
    for mode in ("3d", "nadir", "oblique"):
        assert summ[mode]["TP"] == summ[mode]["FN"] == 0
        assert summ[mode]["C_P"] == "n/a"
        assert summ[mode]["C_N"] == 100.0


def test_jobs_do_not_change_outputs(tmp_path):
    a = small_dataset(tmp_path / "a")
    b = small_dataset(tmp_path / "b")
    run_all(a, jobs=1)
    run_all(b, jobs=3)
    ta, tb = tree_bytes(a.out), tree_bytes(b.out)
    assert ta.keys() == tb.keys()
    for k in ta:
        if not k.startswith(".stamps"):
            assert ta[k] == tb[k], k


def test_stage_order_enforced(tmp_path):
    cfg = small_dataset(tmp_path)
    with pytest.raises(MissingArtifact) as exc:
        cmd_verify(cfg)
    assert "extrude" in str(exc.value)
    cmd_render(cfg)
    with pytest.raises(MissingArtifact) as exc:
        cmd_extract(cfg)
    assert "lod1.json" in str(exc.value)
    cmd_extrude(cfg)
    cmd_extract(cfg)
    with pytest.raises(MissingArtifact):
        cmd_verify(cfg)


def test_verify_without_truth_reports_decisions_only(tmp_path):
    cfg = small_dataset(tmp_path)
    (tmp_path / "changes.json").unlink()
    text = run_all(cfg)
    summ = io.read_json(cfg.out / "summary.json")
    assert "TP" not in summ["3d"]
    assert "3d flagged: b01" in text


@pytest.mark.parametrize(
    "patch",
    [
        {"gsd": 0},
        {"input_size": 48},
        {"classifier": "svm"},
        {"occlusion_threshold": -1},
        {"train": {"epochs": 3, "dropout": 0.5}},
        {"ground_filter": {"threshold": -2}},
        {"surprise": 1},
    ],
)
def test_bad_config_rejected(tmp_path, patch):
    data = {"dataset_root": ".", **patch}
    (tmp_path / "config.json").write_text(json.dumps(data))
    with pytest.raises(ValidationError):
        PipelineConfig.load(tmp_path / "config.json")


def test_config_paths_resolve_relative_to_file(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "config.json").write_text(json.dumps({"dataset_root": "..", "output": "runs/a"}))
    cfg = PipelineConfig.load(tmp_path / "sub" / "config.json", seed=7)
    assert cfg.out.resolve() == (tmp_path / "runs" / "a").resolve()
    assert cfg.seed == 7
