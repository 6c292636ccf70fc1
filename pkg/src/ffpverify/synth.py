"""Synthetic block-world scenes with a penta-view camera ring.

A grid of box buildings stands on flat ground. Demolished buildings are
replaced by either low rubble (a noisy height field) or a ``slab``: a 3 m
platform whose roof-textured top still reads as a roof from straight above
while its sides and the empty volume above it show background in oblique
views. All buildings, demolished or not, stay in the footprint file and in
the digital surface model, which describes the scene before the change.

Colour images are flat-shaded procedural textures evaluated at the surface
point seen by each pixel; label images carry the class of that surface.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .camera import CameraView, depth_to_metric, look_at, make_camera, pixel_ray, save_poses
from .errors import SpecError
from .geometry import points_in_polygon
from .lod1 import Footprint, HeightGrid, save_footprints, save_height_grid
from .network import BACKGROUND, FACADE, ROOF
from .render import NO_HIT, TriangleMesh, render_depth
from .textures import texture, value_noise

SKY = (150.0, 180.0, 210.0)
SUN = np.array([0.35, -0.45, 0.82]) / np.linalg.norm([0.35, -0.45, 0.82])
DIRECTIONS = {"n": (0.0, 1.0), "e": (1.0, 0.0), "s": (0.0, -1.0), "w": (-1.0, 0.0)}


@dataclass
class SyntheticSceneSpec:
    """Parameters of a synthetic scene.

    ``demolished`` maps building ids to ``"rubble"`` or ``"slab"``.
    Building ids are ``b00``, ``b01``, ... in row-major order from the
    south-west corner.
    """

    rows: int = 3
    cols: int = 4
    spacing: float = 32.0
    size_range: tuple = (12.0, 18.0)
    floors_range: tuple = (3, 8)
    floor_height: float = 3.0
    demolished: dict = field(default_factory=lambda: {"b05": "rubble", "b06": "slab"})
    slab_height: float = 3.0
    tilt_deg: float = 45.0
    distance: float = 200.0
    width: int = 512
    height: int = 512
    focal: float = 600.0
    dsm_cell: float = 1.0
    ground_extent: float = 600.0
    seed: int = 0

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise SpecError("need at least one building row and column")
        lo, hi = self.size_range
        if not 0 < lo <= hi or hi >= self.spacing:
            raise SpecError("footprint sizes must be positive and smaller than the grid spacing")
        flo, fhi = self.floors_range
        if not 1 <= flo <= fhi:
            raise SpecError("floor range must satisfy 1 <= min <= max")
        ids = set(self.building_ids())
        for bid, kind in self.demolished.items():
            if bid not in ids:
                raise SpecError(f"demolished building {bid!r} is not in the scene")
            if kind not in ("rubble", "slab"):
                raise SpecError(f"unknown demolition kind {kind!r}")
        if not 0 <= self.tilt_deg < 90:
            raise SpecError("tilt must lie in [0, 90) degrees")
        if self.slab_height >= self.floor_height * flo:
            raise SpecError("slab must be lower than the lowest building")
        if min(self.width, self.height, self.focal, self.distance, self.dsm_cell) <= 0:
            raise SpecError("image size, focal length, distance and DSM cell must be positive")

    def building_ids(self) -> list:
        return [f"b{i:02d}" for i in range(self.rows * self.cols)]

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown scene spec keys {sorted(unknown)}")
        d = dict(d)
        for k in ("size_range", "floors_range"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            spec = cls(**d)
        except TypeError as exc:
            raise SpecError(str(exc)) from exc
        spec.validate()
        return spec


@dataclass
class Surface:
    """Texture frame of one planar (or height-field) surface."""

    name: str
    style: str
    label: int
    origin: np.ndarray
    e_u: np.ndarray
    e_v: np.ndarray
    normal: Optional[np.ndarray]
    key: int


@dataclass
class SyntheticScene:
    spec: SyntheticSceneSpec
    footprints: list
    heights: dict
    mesh: TriangleMesh
    surfaces: list
    groups: list
    cameras: list

    @property
    def demolished(self) -> dict:
        return {fp.building_id: fp.building_id in self.spec.demolished for fp in self.footprints}


def _box(x0, y0, x1, y1, z0, z1):
    """Roof quad then four walls (counter-clockwise footprint order)."""
    ring = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    roof = [(x, y, z1) for x, y in ring]
    walls = []
    for i in range(4):
        (ax, ay), (bx, by) = ring[i], ring[(i + 1) % 4]
        walls.append([(ax, ay, z0), (bx, by, z0), (bx, by, z1), (ax, ay, z1)])
    return roof, walls


class _MeshBuilder:
    def __init__(self):
        self.verts, self.tris, self.labels, self.tiles, self.groups = [], [], [], [], []
        self.surfaces = []

    def surface(self, s: Surface) -> int:
        self.surfaces.append(s)
        return len(self.surfaces) - 1

    def quad(self, pts, sid):
        base = len(self.verts)
        self.verts.extend(pts)
        for tri in ((0, 1, 2), (0, 2, 3)):
            self.tris.append([base + k for k in tri])
            self.labels.append(self.surfaces[sid].label)
            self.tiles.append(sid)
            self.groups.append(self.surfaces[sid].name)

    def grid(self, xs, ys, z, sid):
        base = len(self.verts)
        nx = len(xs)
        for j, y in enumerate(ys):
            for i, x in enumerate(xs):
                self.verts.append((x, y, z[j, i]))
        for j in range(len(ys) - 1):
            for i in range(nx - 1):
                a = base + j * nx + i
                for tri in ((a, a + 1, a + nx + 1), (a, a + nx + 1, a + nx)):
                    self.tris.append(list(tri))
                    self.labels.append(self.surfaces[sid].label)
                    self.tiles.append(sid)
                    self.groups.append(self.surfaces[sid].name)

    def mesh(self) -> TriangleMesh:
        return TriangleMesh(np.asarray(self.verts), np.asarray(self.tris), self.labels, self.tiles)


def _wall_surface(name, pts, style, label, key):
    a, b = np.asarray(pts[0]), np.asarray(pts[1])
    e_u = (b - a) / np.linalg.norm(b - a)
    n = np.array([e_u[1], -e_u[0], 0.0])
    top = np.array([a[0], a[1], pts[3][2]])
    return Surface(name, style, label, top, e_u, np.array([0.0, 0.0, -1.0]), n, key)


def rubble_height(x, y, key):
    return 0.3 + 2.2 * value_noise(x, y, key, 3.0)


def camera_ring(spec: SyntheticSceneSpec, target=(0.0, 0.0, 0.0)) -> list:
    """One nadir camera and four obliques tilted ``tilt_deg`` from vertical.

    At zero tilt the obliques keep the image-up direction they converge to
    as the tilt shrinks.
    """
    t = np.asarray(target, dtype=np.float64)
    common = dict(width=spec.width, height=spec.height, fx=spec.focal)
    cams = [
        make_camera(
            center=t + [0.0, 0.0, spec.distance],
            rotation=look_at(t + [0.0, 0.0, spec.distance], t, up=(0.0, 1.0, 0.0)),
            view_id="nadir",
            angle_class="nadir",
            **common,
        )
    ]
    tilt = math.radians(spec.tilt_deg)
    for name, (dx, dy) in DIRECTIONS.items():
        eye = t + spec.distance * np.array([math.sin(tilt) * dx, math.sin(tilt) * dy, math.cos(tilt)])
        cams.append(
            make_camera(
                center=eye,
                rotation=look_at(eye, t, up=(0.0, 0.0, 1.0) if tilt > 0 else (-dx, -dy, 0.0)),
                view_id=f"oblique_{name}",
                angle_class="oblique",
                **common,
            )
        )
    return cams


def build_scene(spec: SyntheticSceneSpec) -> SyntheticScene:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    mb = _MeshBuilder()
    g = spec.ground_extent
    sid = mb.surface(Surface("ground", "noise", BACKGROUND, np.zeros(3), np.array([1.0, 0, 0]), np.array([0, -1.0, 0]), np.array([0, 0, 1.0]), 1))
    mb.quad([(-g, -g, 0.0), (g, -g, 0.0), (g, g, 0.0), (-g, g, 0.0)], sid)

    footprints, heights = [], {}
    for k, bid in enumerate(spec.building_ids()):
        r, c = divmod(k, spec.cols)
        cx = (c - (spec.cols - 1) / 2) * spec.spacing + rng.uniform(-1.5, 1.5)
        cy = (r - (spec.rows - 1) / 2) * spec.spacing + rng.uniform(-1.5, 1.5)
        w, d = (np.round(rng.uniform(*spec.size_range, size=2) * 2) / 2).tolist()
        floors = int(rng.integers(spec.floors_range[0], spec.floors_range[1] + 1))
        h = floors * spec.floor_height
        x0, y0, x1, y1 = cx - w / 2, cy - d / 2, cx + w / 2, cy + d / 2
        footprints.append(Footprint(bid, np.array([(x0, y0), (x1, y0), (x1, y1), (x0, y1)]), floors))
        heights[bid] = h
        key = 100 + 10 * k
        kind = spec.demolished.get(bid)
        if kind is None:
            roof, walls = _box(x0, y0, x1, y1, 0.0, h)
            s = mb.surface(Surface(f"{bid}/roof", "tiles", ROOF, np.array([x0, y1, h]), np.array([1.0, 0, 0]), np.array([0, -1.0, 0]), np.array([0, 0, 1.0]), key))
            mb.quad(roof, s)
            for i, wall in enumerate(walls):
                mb.quad(wall, mb.surface(_wall_surface(f"{bid}/facade{i}", wall, "windows", FACADE, key + 1 + i)))
        elif kind == "slab":
            sh = spec.slab_height
            roof, walls = _box(x0, y0, x1, y1, 0.0, sh)
            s = mb.surface(Surface(f"{bid}/slab_top", "tiles", ROOF, np.array([x0, y1, sh]), np.array([1.0, 0, 0]), np.array([0, -1.0, 0]), np.array([0, 0, 1.0]), key))
            mb.quad(roof, s)
            for i, wall in enumerate(walls):
                mb.quad(wall, mb.surface(_wall_surface(f"{bid}/slab_side{i}", wall, "noise", BACKGROUND, key + 1 + i)))
        else:
            step = 1.0
            xs = np.linspace(x0 - 1, x1 + 1, max(2, int(math.ceil((w + 2) / step)) + 1))
            ys = np.linspace(y0 - 1, y1 + 1, max(2, int(math.ceil((d + 2) / step)) + 1))
            X, Y = np.meshgrid(xs, ys)
            Z = rubble_height(X, Y, key)
            edge = np.zeros_like(Z, dtype=bool)
            edge[[0, -1], :] = True
            edge[:, [0, -1]] = True
            Z[edge] = 0.0
            s = mb.surface(Surface(f"{bid}/rubble", "noise", BACKGROUND, np.zeros(3), np.array([1.0, 0, 0]), np.array([0, -1.0, 0]), None, key))
            mb.grid(xs, ys, Z, s)
    return SyntheticScene(spec, footprints, heights, mb.mesh(), mb.surfaces, mb.groups, camera_ring(spec))


def pre_change_dsm(scene: SyntheticScene) -> HeightGrid:
    """Surface model before the change: ground at 0 and every building intact."""
    spec = scene.spec
    half = (max(spec.rows, spec.cols) / 2 + 1) * spec.spacing
    n = int(math.ceil(2 * half / spec.dsm_cell))
    grid = HeightGrid(np.zeros((n, n)), (-half, -half), spec.dsm_cell)
    xs, ys = grid.cell_centers()
    z = np.zeros_like(xs)
    for fp in scene.footprints:
        inside = points_in_polygon(xs, ys, fp.polygon)
        z[inside] = np.maximum(z[inside], scene.heights[fp.building_id])
    return grid.with_values(z)


def world_points(view: CameraView, depth_ndc: np.ndarray) -> np.ndarray:
    """World position of the surface seen at each pixel center (NaN if none)."""
    h, w = depth_ndc.shape
    cols, rows = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    origin, d = pixel_ray(view, np.stack([cols, rows], axis=-1))
    hit = depth_ndc < NO_HIT
    metric = np.full(depth_ndc.shape, np.nan)
    metric[hit] = depth_to_metric(depth_ndc[hit], view)
    t = metric / (d @ view.forward)
    return origin + d * t[..., None]


def render_view(scene: SyntheticScene, view: CameraView, jobs: int = 1):
    """Return ``(color uint8 (H, W, 3), labels int (H, W), depth DepthMap)``."""
    dm, ids = render_depth(scene.mesh, view, return_ids=True, jobs=jobs)
    X = world_points(view, dm.values)
    color = np.empty(ids.shape + (3,))
    color[:] = SKY
    labels = np.full(ids.shape, -1, dtype=np.int64)
    hit = ids >= 0
    sids = np.full(ids.shape, -1, dtype=np.int64)
    sids[hit] = scene.mesh.tiles[ids[hit]]
    labels[hit] = scene.mesh.labels[ids[hit]]
    for sid in np.unique(sids[hit]):
        s = scene.surfaces[sid]
        m = sids == sid
        rel = X[m] - s.origin
        rgb = texture(s.style, rel @ s.e_u, rel @ s.e_v, s.key)
        if s.normal is not None:
            shade = 0.55 + 0.45 * max(0.0, float(s.normal @ SUN))
        else:
            tri = scene.mesh.vertices[scene.mesh.triangles[ids[m]]]
            nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
            nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
            shade = (0.55 + 0.45 * np.clip(nrm @ SUN, 0.0, None))[:, None]
        color[m] = rgb * shade
    return np.clip(np.rint(color), 0, 255).astype(np.uint8), labels, dm


def write_dataset(root, spec: SyntheticSceneSpec, jobs: int = 1) -> dict:
    """Generate the scene and write every input file; returns the pipeline config."""
    root = Path(root)
    scene = build_scene(spec)
    io.write_obj(root / "scene.obj", scene.mesh.vertices, scene.mesh.triangles, scene.groups)
    save_poses(root / "poses.json", scene.cameras)
    save_footprints(root / "footprints.geojson", scene.footprints)
    io.write_json(root / "changes.json", scene.demolished)
    save_height_grid(root / "dsm.pfm", pre_change_dsm(scene))
    for cam in scene.cameras:
        color, labels, _ = render_view(scene, cam, jobs=jobs)
        io.write_png(root / "images" / f"{cam.view_id}.png", color)
        lab = np.where(labels < 0, 255, labels).astype(np.uint8)
        io.write_png(root / "labels" / f"{cam.view_id}.png", lab)
    spec_dict = asdict(spec)
    io.write_json(root / "scene_spec.json", json.loads(json.dumps(spec_dict)))
    config = {
        "dataset_root": ".",
        "poses": "poses.json",
        "meshes": ["scene.obj"],
        "footprints": "footprints.geojson",
        "dsm": "dsm.pfm",
        "images": "images",
        "labels": "labels",
        "changes": "changes.json",
        "output": "out",
        "seed": spec.seed,
    }
    io.write_json(root / "config.json", config)
    return config
