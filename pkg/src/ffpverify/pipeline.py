"""Stage orchestration: render, extrude, extract, train, classify, verify, report.

Every stage reads its inputs from the configured dataset and earlier stage
outputs, writes its artifacts atomically below the output directory and
records a content stamp. A stage whose stamp still matches (same inputs,
same parameters, outputs untouched) is skipped unless forced.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .camera import load_poses
from .errors import MissingArtifact, MissingInput, PatchTooSmall, ValidationError
from .lod1 import (
    GroundFilterParams,
    Lod1Building,
    enumerate_faces,
    extrude_footprint,
    filter_ground,
    load_footprints,
    load_height_grid,
    save_height_grid,
)
from .network import BACKGROUND, CLASSES, FFPClassifier
from .patches import OCCLUSION_THRESHOLD, FaceProjection, assemble_sample, extract_patch
from .render import DepthMap, TriangleMesh, render_depth
from .voting import (
    MODES,
    build_candidates,
    confusion,
    patch_verdict,
    summary,
    vote,
    write_verdicts,
)

logger = logging.getLogger(__name__)

STAGES = ("render", "extrude", "extract", "train", "classify", "verify", "report")


@dataclass
class TrainSettings:
    width: float = 0.125
    epochs: int = 50
    lr: float = 0.1
    lr_decay: float = 0.2
    decay_every: int = 10
    batch_size: int = 32
    momentum: float = 0.9
    test_size: float = 0.3
    use_depth: bool = True


@dataclass
class PipelineConfig:
    """Run configuration; relative paths resolve against ``dataset_root``."""

    dataset_root: Path
    poses: str = "poses.json"
    meshes: list = field(default_factory=lambda: ["scene.obj"])
    footprints: str = "footprints.geojson"
    dsm: str = "dsm.pfm"
    images: str = "images"
    labels: Optional[str] = "labels"
    changes: Optional[str] = "changes.json"
    output: str = "out"
    seed: int = 0
    occlusion_threshold: float = OCCLUSION_THRESHOLD
    gsd: float = 0.3
    input_size: int = 32
    ground_filter: dict = field(default_factory=dict)
    train: TrainSettings = field(default_factory=TrainSettings)
    classifier: str = "ffp"
    near: float = 1.0
    far: float = 5000.0

    def __post_init__(self):
        self.dataset_root = Path(self.dataset_root)
        if isinstance(self.train, dict):
            unknown = set(self.train) - set(TrainSettings.__dataclass_fields__)
            if unknown:
                raise ValidationError(f"unknown train settings {sorted(unknown)}")
            self.train = TrainSettings(**self.train)
        if not self.occlusion_threshold > 0:
            raise ValidationError("occlusion threshold must be positive")
        if not self.gsd > 0:
            raise ValidationError("gsd must be positive")
        if self.input_size <= 0 or self.input_size % 32:
            raise ValidationError("input size must be a positive multiple of 32")
        if self.classifier not in ("ffp", "oracle"):
            raise ValidationError(f"unknown classifier {self.classifier!r}")
        self.ground_params()

    def ground_params(self) -> GroundFilterParams:
        return GroundFilterParams(**self.ground_filter)

    def path(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.dataset_root / p

    @property
    def out(self) -> Path:
        return self.path(self.output)

    @classmethod
    def load(cls, path, **overrides) -> "PipelineConfig":
        path = Path(path)
        data = io.read_json(path)
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
        root = Path(data.pop("dataset_root", "."))
        if not root.is_absolute():
            root = path.parent / root
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(dataset_root=root, **data)

    def fingerprint(self, *keys) -> dict:
        d = asdict(self)
        d["dataset_root"] = None
        return {k: d[k] for k in keys}


# ----------------------------------------------------------------------------
# stamps


def _require(path: Path, stage: Optional[str] = None) -> Path:
    if not path.exists():
        if stage:
            raise MissingArtifact(stage, path)
        raise MissingInput(f"missing input file: {path}")
    return path


def _digest_inputs(paths) -> dict:
    return {str(p): io.file_digest(p) for p in sorted(map(Path, paths))}


class Stamp:
    """Content stamp of one stage: hash of inputs and params, plus output digests."""

    def __init__(self, cfg: PipelineConfig, stage: str, inputs, params: dict):
        self.path = cfg.out / ".stamps" / f"{stage}.json"
        payload = json.dumps(
            {"stage": stage, "inputs": _digest_inputs(inputs), "params": params}, sort_keys=True, default=str
        )
        root = str(cfg.dataset_root)
        self.key = hashlib.sha256(payload.replace(root, "<root>").encode()).hexdigest()

    def fresh(self) -> bool:
        if not self.path.exists():
            return False
        rec = io.read_json(self.path)
        if rec.get("key") != self.key:
            return False
        for p, dig in rec.get("outputs", {}).items():
            q = self.path.parent.parent / p
            if not q.exists() or io.file_digest(q) != dig:
                return False
        return True

    def write(self, outputs) -> None:
        base = self.path.parent.parent
        outs = {str(Path(p).relative_to(base)): io.file_digest(p) for p in sorted(map(Path, outputs))}
        io.write_json(self.path, {"key": self.key, "outputs": outs})


def _run_stage(cfg, stage, inputs, params, body, force):
    stamp = Stamp(cfg, stage, inputs, params)
    if not force and stamp.fresh():
        logger.info("%s: up to date", stage)
        return False
    outputs = body()
    stamp.write(outputs)
    logger.info("%s: wrote %d files", stage, len(outputs))
    return True


# ----------------------------------------------------------------------------
# loading helpers


def load_mesh(cfg: PipelineConfig) -> TriangleMesh:
    parts = []
    for rel in cfg.meshes:
        p = _require(cfg.path(rel))
        if p.suffix.lower() == ".ply":
            v, f = io.read_ply(p)
        else:
            v, f, _ = io.read_obj(p)
        parts.append(TriangleMesh(v, f))
    return TriangleMesh.concatenate(parts).cleaned()


def load_cameras(cfg: PipelineConfig):
    return load_poses(_require(cfg.path(cfg.poses)), near=cfg.near, far=cfg.far)


def _mesh_paths(cfg):
    return [cfg.path(m) for m in cfg.meshes]


def load_buildings(cfg: PipelineConfig) -> list:
    p = _require(cfg.out / "lod1" / "lod1.json", "extrude")
    return [Lod1Building.from_dict(d) for d in io.read_json(p)["buildings"]]


def load_depth(cfg: PipelineConfig, cam) -> DepthMap:
    p = _require(cfg.out / "depth" / f"{io.safe_name(cam.view_id)}.pfm", "render")
    return DepthMap(io.read_pfm(p).astype(np.float64), cam)


# ----------------------------------------------------------------------------
# stages


def cmd_render(cfg: PipelineConfig, jobs: int = 1, force: bool = False) -> bool:
    inputs = [_require(cfg.path(cfg.poses))] + [_require(p) for p in _mesh_paths(cfg)]

    def body():
        mesh = load_mesh(cfg)
        cams = load_cameras(cfg)
        outs, index = [], []
        for cam in cams:
            dm = render_depth(mesh, cam, jobs=jobs)
            p = cfg.out / "depth" / f"{io.safe_name(cam.view_id)}.pfm"
            io.write_pfm(p, dm.values.astype(np.float32))
            outs.append(p)
            index.append({"view_id": cam.view_id, "file": p.name, "width": cam.width, "height": cam.height})
        ip = cfg.out / "depth" / "index.json"
        io.write_json(ip, {"views": index})
        return outs + [ip]

    return _run_stage(cfg, "render", inputs, cfg.fingerprint("near", "far"), body, force)


def cmd_extrude(cfg: PipelineConfig, jobs: int = 1, force: bool = False) -> bool:
    dsm = _require(cfg.path(cfg.dsm))
    inputs = [dsm, _require(dsm.with_suffix(".json")), _require(cfg.path(cfg.footprints))]

    def body():
        surface = load_height_grid(dsm)
        ground, mask = filter_ground(surface, cfg.ground_params())
        buildings = [extrude_footprint(fp, surface, ground) for fp in load_footprints(cfg.path(cfg.footprints))]
        gp = cfg.out / "lod1" / "ground.pfm"
        save_height_grid(gp, ground)
        mp = cfg.out / "lod1" / "ground_mask.png"
        io.write_png(mp, mask.astype(np.uint8) * 255)
        lp = cfg.out / "lod1" / "lod1.json"
        io.write_json(lp, {"buildings": [b.to_dict() for b in buildings]})
        return [gp, gp.with_suffix(".json"), mp, lp]

    return _run_stage(cfg, "extrude", inputs, cfg.fingerprint("ground_filter"), body, force)


def ground_faces(buildings, cfg: PipelineConfig, size: float = 8.0) -> list:
    """Horizontal ground squares midway between neighbouring buildings.

    Their patches are background examples for training; they never take
    part in voting.
    """
    from .lod1 import Face

    cents = np.array([b.footprint.mean(axis=0) for b in buildings])
    faces = []
    for i in range(len(buildings)):
        for j in range(i + 1, len(buildings)):
            mid = 0.5 * (cents[i] + cents[j])
            clear = all(
                np.all(np.abs(mid - b.footprint.mean(axis=0)) > 0.5 * np.ptp(b.footprint, axis=0) + size / 2 + 1.0)
                for b in buildings
            )
            if not clear or any(np.allclose(mid, f.vertices[:, :2].mean(axis=0), atol=1.0) for f in faces):
                continue
            h = size / 2
            base = min(b.base for b in buildings)
            quad = np.array([[mid[0] - h, mid[1] - h], [mid[0] + h, mid[1] - h], [mid[0] + h, mid[1] + h], [mid[0] - h, mid[1] + h]])
            gid = f"ground{len(faces):03d}"
            verts = np.column_stack([quad, np.full(4, base)])
            faces.append(Face(f"{gid}/roof", gid, "roof", verts, np.array([0.0, 0.0, 1.0])))
    return faces


def _oracle_label(sample) -> int:
    if sample.labels is None:
        return -1
    lab = sample.labels[sample.mask]
    lab = lab[(lab >= 0) & (lab < len(CLASSES))]
    if lab.size == 0:
        return BACKGROUND
    counts = np.bincount(lab, minlength=len(CLASSES))
    return int(np.argmax(counts))


def _extract_view(cfg, cam, faces):
    color = io.read_png(_require(cfg.path(cfg.images) / f"{cam.view_id}.png"))
    labels = None
    if cfg.labels:
        lp = cfg.path(cfg.labels) / f"{cam.view_id}.png"
        if lp.exists():
            raw = io.read_png(lp).astype(np.int64)
            labels = np.where(raw == 255, -1, raw)
    depth = load_depth(cfg, cam)
    projs, samples = [], []
    for face, ground in faces:
        proj, sample = extract_patch(face, cam, color, depth, cfg.gsd, cfg.occlusion_threshold, labels=labels)
        x = None
        if sample is not None:
            try:
                x = assemble_sample(sample, cfg.input_size)
            except PatchTooSmall:
                sample = None
        if sample is None:
            proj = proj.with_visible_area(0.0)
        if not ground:
            projs.append(proj)
        if sample is not None:
            samples.append((sample, x, "ground" if ground else sample.kind))
    return projs, samples


def cmd_extract(cfg: PipelineConfig, jobs: int = 1, force: bool = False) -> bool:
    cams = load_cameras(cfg)
    inputs = [cfg.path(cfg.poses), _require(cfg.out / "lod1" / "lod1.json", "extrude")]
    for cam in cams:
        inputs.append(_require(cfg.out / "depth" / f"{io.safe_name(cam.view_id)}.pfm", "render"))
        inputs.append(_require(cfg.path(cfg.images) / f"{cam.view_id}.png"))
        if cfg.labels and (cfg.path(cfg.labels) / f"{cam.view_id}.png").exists():
            inputs.append(cfg.path(cfg.labels) / f"{cam.view_id}.png")
    params = cfg.fingerprint("gsd", "occlusion_threshold", "input_size", "near", "far")

    def body():
        buildings = load_buildings(cfg)
        faces = [(f, False) for b in buildings for f in enumerate_faces(b)]
        faces += [(f, True) for f in ground_faces(buildings, cfg)]
        work = lambda cam: _extract_view(cfg, cam, faces)  # noqa: E731
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as ex:
                results = list(ex.map(work, cams))
        else:
            results = [work(cam) for cam in cams]
        pdir = cfg.out / "patches"
        outs, rows, xs, projs = [], [], [], []
        for cam_projs, cam_samples in results:
            projs.extend(cam_projs)
            for sample, x, kind in cam_samples:
                stem = io.safe_name(sample.sample_id)
                files = {"color": f"{stem}.png", "depth": f"{stem}.pfm", "mask": f"{stem}_mask.png"}
                rgb = np.nan_to_num(np.asarray(sample.color, dtype=np.float64), nan=0.0)
                io.write_png(pdir / files["color"], rgb)
                io.write_pfm(pdir / files["depth"], np.nan_to_num(sample.depth, nan=0.0).astype(np.float32))
                io.write_png(pdir / files["mask"], sample.mask.astype(np.uint8) * 255)
                outs += [pdir / f for f in files.values()]
                rows.append(
                    {
                        "sample_id": sample.sample_id,
                        "building_id": sample.building_id,
                        "face_id": sample.face_id,
                        "view_id": sample.view_id,
                        "kind": kind,
                        "projected_area_px2": sample.projected_area,
                        "visible_area_px2": sample.visible_area,
                        "bbox": list(sample.bbox),
                        "label": _oracle_label(sample),
                        "files": files,
                    }
                )
                xs.append(x)
        X = np.stack(xs) if xs else np.zeros((0, 4, cfg.input_size, cfg.input_size), np.float32)
        xp = pdir / "inputs.npy"
        buf = _io.BytesIO()
        np.save(buf, X.astype(np.float32), allow_pickle=False)
        io.write_bytes(xp, buf.getvalue())
        mp = pdir / "manifest.json"
        io.write_json(mp, {"samples": rows, "inputs": xp.name})
        pp = pdir / "projections.json"
        io.write_json(
            pp,
            {
                "projections": [
                    {
                        "face_id": p.face_id,
                        "view_id": p.view_id,
                        "area": p.area,
                        "visible_area": p.visible_area,
                        "in_frustum": p.in_frustum,
                        "front_facing": p.front_facing,
                    }
                    for p in projs
                ]
            },
        )
        return outs + [xp, mp, pp]

    return _run_stage(cfg, "extract", inputs, params, body, force)


def load_samples(cfg: PipelineConfig):
    mp = _require(cfg.out / "patches" / "manifest.json", "extract")
    manifest = io.read_json(mp)
    X = np.load(_require(cfg.out / "patches" / manifest["inputs"], "extract"), allow_pickle=False)
    return manifest["samples"], X


def cmd_train(cfg: PipelineConfig, jobs: int = 1, force: bool = False) -> bool:
    mp = _require(cfg.out / "patches" / "manifest.json", "extract")
    inputs = [mp, _require(cfg.out / "patches" / "inputs.npy", "extract")]
    params = cfg.fingerprint("train", "seed")

    def body():
        rows, X = load_samples(cfg)
        y = np.array([r["label"] for r in rows], dtype=np.int64)
        if np.any(y < 0):
            raise MissingInput("training needs label images to derive patch labels")
        t = cfg.train
        clf = FFPClassifier(
            width=t.width,
            epochs=t.epochs,
            lr=t.lr,
            lr_decay=t.lr_decay,
            decay_every=t.decay_every,
            batch_size=t.batch_size,
            momentum=t.momentum,
            test_size=t.test_size,
            use_depth=t.use_depth,
            seed=cfg.seed,
        )
        import torch

        threads = torch.get_num_threads()
        torch.set_num_threads(1)
        try:
            clf.fit(X, y)
        finally:
            torch.set_num_threads(threads)
        wp = cfg.out / "model" / "weights.ffpw"
        lp = cfg.out / "model" / "train_log.csv"
        clf.save(wp)
        clf.write_log(lp)
        return [wp, lp]

    return _run_stage(cfg, "train", inputs, params, body, force)


PRED_FIELDS = ("sample_id", "building_id", "face_id", "view_id", "kind", "predicted", "p_roof", "p_facade", "p_background")


def cmd_classify(cfg: PipelineConfig, jobs: int = 1, force: bool = False, classifier: Optional[str] = None) -> bool:
    classifier = classifier or cfg.classifier
    mp = _require(cfg.out / "patches" / "manifest.json", "extract")
    inputs = [mp, _require(cfg.out / "patches" / "inputs.npy", "extract")]
    if classifier == "ffp":
        inputs.append(_require(cfg.out / "model" / "weights.ffpw", "train"))

    def body():
        rows, X = load_samples(cfg)
        if classifier == "ffp":
            clf = FFPClassifier.load(cfg.out / "model" / "weights.ffpw")
            probs = clf.predict_proba(X) if len(X) else np.zeros((0, len(CLASSES)))
        else:
            labels = np.array([r["label"] for r in rows], dtype=np.int64)
            if np.any(labels < 0):
                raise MissingInput("the oracle classifier needs label images")
            probs = np.eye(len(CLASSES))[labels] if len(labels) else np.zeros((0, len(CLASSES)))
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PRED_FIELDS)
        for r, p in zip(rows, probs):
            w.writerow([r["sample_id"], r["building_id"], r["face_id"], r["view_id"], r["kind"], int(np.argmax(p))] + [repr(float(v)) for v in p])
        pp = cfg.out / "predictions.csv"
        io.write_text(pp, buf.getvalue())
        return [pp]

    return _run_stage(cfg, "classify", inputs, {"classifier": classifier}, body, force)


def load_projections(cfg: PipelineConfig) -> dict:
    pp = _require(cfg.out / "patches" / "projections.json", "extract")
    out = {}
    for d in io.read_json(pp)["projections"]:
        p = FaceProjection(d["face_id"], d["view_id"], np.zeros((0, 2)), d["area"], d["in_frustum"], d["front_facing"], d["visible_area"])
        out.setdefault(p.face_id, []).append(p)
    return out


def load_predictions(cfg: PipelineConfig) -> dict:
    pp = _require(cfg.out / "predictions.csv", "classify")
    verdicts = {}
    with open(pp, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["kind"] == "ground":
                continue
            probs = [float(r["p_roof"]), float(r["p_facade"]), float(r["p_background"])]
            verdicts[(r["face_id"], r["view_id"])] = patch_verdict(r["sample_id"], r["face_id"], r["view_id"], r["kind"], probs)
    return verdicts


def mode_views(cams, mode: str):
    if mode == "3d":
        return None
    return [c.view_id for c in cams if c.angle_class == mode]


def verify_buildings(buildings, projections, verdicts, cams, mode: str) -> list:
    out = []
    for b in buildings:
        cand = build_candidates(b, projections, mode_views(cams, mode))
        out.append(vote(cand, verdicts, mode))
    return out


def cmd_verify(cfg: PipelineConfig, jobs: int = 1, force: bool = False, modes=MODES) -> bool:
    inputs = [
        cfg.path(cfg.poses),
        _require(cfg.out / "lod1" / "lod1.json", "extrude"),
        _require(cfg.out / "patches" / "projections.json", "extract"),
        _require(cfg.out / "predictions.csv", "classify"),
    ]
    truth_path = cfg.path(cfg.changes) if cfg.changes else None
    if truth_path is not None and truth_path.exists():
        inputs.append(truth_path)
    else:
        truth_path = None

    def body():
        cams = load_cameras(cfg)
        buildings = load_buildings(cfg)
        projections = load_projections(cfg)
        verdicts = load_predictions(cfg)
        truth = io.read_json(truth_path) if truth_path else None
        outs, summ = [], {}
        for mode in modes:
            res = verify_buildings(buildings, projections, verdicts, cams, mode)
            vp = cfg.out / f"verdicts_{mode}.csv"
            write_verdicts(vp, res)
            outs.append(vp)
            decisions = {}
            for v in res:
                decisions[v.decision] = decisions.get(v.decision, 0) + 1
            entry = {"decisions": dict(sorted(decisions.items()))}
            if truth is not None:
                entry.update(summary(confusion(res, truth)))
            summ[mode] = entry
        sp = cfg.out / "summary.json"
        io.write_json(sp, summ)
        return outs + [sp]

    return _run_stage(cfg, "verify", inputs, {"modes": list(modes)}, body, force)


def cmd_report(cfg: PipelineConfig, jobs: int = 1, force: bool = False) -> str:
    sp = _require(cfg.out / "summary.json", "verify")
    summ = io.read_json(sp)
    lines = ["mode      TP   FN   FP   TN     C_P     C_N   decisions"]
    for mode, e in summ.items():
        dec = ", ".join(f"{k}={v}" for k, v in e["decisions"].items())
        if "TP" in e:
            lines.append(f"{mode:<8}{e['TP']:>4}{e['FN']:>5}{e['FP']:>5}{e['TN']:>5}{str(e['C_P']):>8}{str(e['C_N']):>8}   {dec}")
        else:
            lines.append(f"{mode:<8}{'-':>4}{'-':>5}{'-':>5}{'-':>5}{'-':>8}{'-':>8}   {dec}")
    for mode in summ:
        vp = cfg.out / f"verdicts_{mode}.csv"
        if vp.exists():
            with open(vp, newline="") as fh:
                flagged = [r["building_id"] for r in csv.DictReader(fh) if r["decision"] != "unchanged"]
            lines.append(f"{mode} flagged: {' '.join(flagged) if flagged else '(none)'}")
    text = "\n".join(lines) + "\n"
    io.write_text(cfg.out / "report.txt", text)
    return text


def run_all(cfg: PipelineConfig, jobs: int = 1, force: bool = False) -> str:
    cmd_render(cfg, jobs, force)
    cmd_extrude(cfg, jobs, force)
    cmd_extract(cfg, jobs, force)
    if cfg.classifier == "ffp":
        cmd_train(cfg, jobs, force)
    cmd_classify(cfg, jobs, force)
    cmd_verify(cfg, jobs, force)
    return cmd_report(cfg, jobs, force)
