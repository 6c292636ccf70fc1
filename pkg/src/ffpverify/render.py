"""Z-buffer rasterization of triangle meshes into normalized depth maps.

Triangles are clipped against the near plane in homogeneous clip space,
rasterized at pixel centers with a top-left fill rule, and composed with a
per-pixel minimum. Normalized depth, like ``1/w``, is affine in screen
space, so barycentric interpolation is exact for planar triangles. :func:`raycast_depth_oracle` is an independent per-pixel
ray/triangle intersection used to check the rasterizer.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .camera import CameraView, depth_to_metric, pixel_ray, to_clip
from .errors import ValidationError
from .geometry import triangulate_polygon

NO_HIT = 1.0  # depth-map sentinel
_MIN_AREA = 1e-12


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle mesh; optional per-triangle integer labels and tile ids."""

    vertices: np.ndarray
    triangles: np.ndarray
    labels: Optional[np.ndarray] = None
    tiles: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValidationError("triangle index out of range")
        for arr in (v, t):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        for name in ("labels", "tiles"):
            extra = getattr(self, name)
            if extra is not None:
                extra = np.array(extra, dtype=np.int64).reshape(-1)
                if len(extra) != len(t):
                    raise ValidationError(f"{name} length must match triangle count")
                extra.setflags(write=False)
                object.__setattr__(self, name, extra)

    def __len__(self):
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def cleaned(self) -> "TriangleMesh":
        """Drop triangles with area <= 1e-12 m^2."""
        keep = self.triangle_areas() > _MIN_AREA
        return TriangleMesh(
            self.vertices,
            self.triangles[keep],
            None if self.labels is None else self.labels[keep],
            None if self.tiles is None else self.tiles[keep],
        )

    @classmethod
    def concatenate(cls, meshes: Sequence["TriangleMesh"]) -> "TriangleMesh":
        verts, tris, labels, tiles = [], [], [], []
        offset = 0
        for k, m in enumerate(meshes):
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            labels.append(m.labels if m.labels is not None else np.full(len(m), -1))
            tiles.append(m.tiles if m.tiles is not None else np.full(len(m), k))
            offset += len(m.vertices)
        if not meshes:
            return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return cls(np.concatenate(verts), np.concatenate(tris), np.concatenate(labels), np.concatenate(tiles))


@dataclass(frozen=True)
class DepthMap:
    """Normalized depth per pixel (row 0 = image top); ``NO_HIT`` where empty."""

    values: np.ndarray
    view: CameraView = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.view.height, self.view.width):
            raise ValidationError(f"depth map shape {v.shape} does not match view {self.view.width}x{self.view.height}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def hit(self) -> np.ndarray:
        return self.values < NO_HIT

    def metric(self) -> np.ndarray:
        """Eye-space depth in meters; NaN where nothing was hit."""
        out = np.full(self.values.shape, np.nan)
        h = self.hit
        out[h] = depth_to_metric(self.values[h], self.view)
        return out


# ----------------------------------------------------------------------------
# rasterization


def _clip_near(poly: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a clip-space polygon against ``z >= -w``."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        da, db = a[2] + a[3], b[2] + b[3]
        if da >= 0:
            out.append(a)
        if (da >= 0) != (db >= 0):
            t = da / (da - db)
            out.append(a + t * (b - a))
    return np.asarray(out)


def _raster_triangle(zbuf, ids, tri_id, sx, sy, z_ndc, width, height):
    """Rasterize one screen-space triangle into ``zbuf`` (in place)."""
    x0, x1, x2 = sx
    y0, y1, y2 = sy
    area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
    if area == 0 or not np.isfinite(area):
        return
    if area < 0:
        # reorder so the interior has positive edge functions
        sx = sx[[0, 2, 1]]
        sy = sy[[0, 2, 1]]
        z_ndc = z_ndc[[0, 2, 1]]
        area = -area
    c0 = max(int(np.floor(sx.min() - 0.5)), 0)
    c1 = min(int(np.ceil(sx.max() - 0.5)), width - 1)
    r0 = max(int(np.floor(sy.min() - 0.5)), 0)
    r1 = min(int(np.ceil(sy.max() - 0.5)), height - 1)
    if c0 > c1 or r0 > r1:
        return
    px = np.arange(c0, c1 + 1, dtype=np.float64) + 0.5
    py = np.arange(r0, r1 + 1, dtype=np.float64)[:, None] + 0.5
    inside = np.ones((r1 - r0 + 1, c1 - c0 + 1), dtype=bool)
    weights = []
    for i in range(3):
        a, b = (i + 1) % 3, (i + 2) % 3
        ax, ay, bx, by = sx[a], sy[a], sx[b], sy[b]
        e = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        top_left = (ay == by and bx > ax) or (by < ay)
        inside &= (e > 0) | ((e == 0) & top_left)
        weights.append(e)
    if not inside.any():
        return
    l0, l1, l2 = (w / area for w in weights)
    # 1/w is affine in screen space and z_ndc is affine in 1/w, so plain
    # screen-space barycentrics on z_ndc are perspective-correct
    z = l0 * z_ndc[0] + l1 * z_ndc[1] + l2 * z_ndc[2]
    inside &= (z >= -1.0) & (z < 1.0)
    tile = zbuf[r0 : r1 + 1, c0 : c1 + 1]
    closer = inside & (z < tile)
    tile[closer] = z[closer]
    if ids is not None:
        ids[r0 : r1 + 1, c0 : c1 + 1][closer] = tri_id


def _rasterize(mesh: TriangleMesh, view: CameraView, tri_indices, with_ids: bool):
    h, w = view.height, view.width
    zbuf = np.full((h, w), NO_HIT)
    ids = np.full((h, w), -1, dtype=np.int64) if with_ids else None
    if len(mesh) == 0:
        return zbuf, ids
    clip = to_clip(view, mesh.vertices)
    tri = mesh.triangles
    for t in tri_indices:
        poly = clip[tri[t]]
        d = poly[:, 2] + poly[:, 3]
        if np.all(d < 0):
            continue
        if np.any(d < 0):
            poly = _clip_near(poly)
            if len(poly) < 3:
                continue
        wv = poly[:, 3]
        if np.any(wv <= 0):
            continue
        ndc = poly[:, :3] / wv[:, None]
        sx = (ndc[:, 0] + 1.0) * 0.5 * w
        sy = (1.0 - ndc[:, 1]) * 0.5 * h
        for k in range(1, len(poly) - 1):
            sel = [0, k, k + 1]
            _raster_triangle(zbuf, ids, t, sx[sel], sy[sel], ndc[sel, 2], w, h)
    return zbuf, ids


def render_depth(mesh: TriangleMesh, view: CameraView, *, return_ids: bool = False, jobs: int = 1):
    """Per-pixel minimum normalized depth over all triangles covering the pixel.

    With ``jobs > 1`` tiles of triangles are rasterized into private buffers
    and min-composed in a fixed order, which equals the sequential result
    bit for bit.
    """
    order = np.arange(len(mesh))
    if jobs <= 1 or len(mesh) < 2 * jobs:
        zbuf, ids = _rasterize(mesh, view, order, return_ids)
    else:
        chunks = np.array_split(order, jobs)
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(lambda c: _rasterize(mesh, view, c, return_ids), chunks))
        zbuf, ids = parts[0]
        for z, i in parts[1:]:
            closer = z < zbuf
            zbuf = np.where(closer, z, zbuf)
            if return_ids:
                ids = np.where(closer, i, ids)
    dm = DepthMap(zbuf, view)
    return (dm, ids) if return_ids else dm


def face_mesh(vertices) -> TriangleMesh:
    """Triangulate one planar 3D polygon."""
    v = np.asarray(vertices, dtype=np.float64)
    n = np.cross(v[1] - v[0], v[2] - v[0])
    for i in range(2, len(v)):
        cand = np.cross(v[1] - v[0], v[i] - v[0])
        if np.linalg.norm(cand) > np.linalg.norm(n):
            n = cand
    drop = int(np.argmax(np.abs(n)))
    keep = [i for i in range(3) if i != drop]
    tris = triangulate_polygon(v[:, keep]) if len(v) > 3 else [(0, 1, 2)]
    return TriangleMesh(v, np.asarray(tris, dtype=np.int64))


def render_face_depth(face, view: CameraView) -> DepthMap:
    """Depth map of one face rendered alone (the face's expected depth layer)."""
    verts = face.vertices if hasattr(face, "vertices") else face
    return render_depth(face_mesh(verts), view)


# ----------------------------------------------------------------------------
# oracle


def _moller_trumbore(orig, d, p0, p1, p2, eps=1e-12):
    """Ray parameters of hits (inf on miss).

    ``orig``/``d`` have shape (R, 3) (``orig`` may also be (1, 3) when all
    rays share an origin) and the triangle corners (T, 3); the result is
    (R, T). Written per component since ``np.cross`` on (R, T, 3) stacks
    is several times slower.
    """
    e1 = (p1 - p0).T[:, None, :]
    e2 = (p2 - p0).T[:, None, :]
    dx, dy, dz = (c[:, None] for c in d.T)
    # pvec = d x e2
    px = dy * e2[2] - dz * e2[1]
    py = dz * e2[0] - dx * e2[2]
    pz = dx * e2[1] - dy * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tx, ty, tz = (orig[:, None, k] - p0[None, :, k] for k in range(3))
    u = (tx * px + ty * py + tz * pz) * inv
    # qvec = tvec x e1
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return np.where(hit, t, np.inf)


def _oracle_depths(mesh: TriangleMesh, view: CameraView, uv: np.ndarray, chunk: int = 128) -> np.ndarray:
    orig, d = pixel_ray(view, uv)
    if np.all(orig == orig[:1]):
        orig = orig[:1]
    along = d @ view.forward
    best = np.full(len(uv), np.inf)
    p = mesh.vertices[mesh.triangles]
    for s in range(0, len(p), chunk):
        q = p[s : s + chunk]
        depth = _moller_trumbore(orig, d, q[:, 0], q[:, 1], q[:, 2]) * along[:, None]
        depth[~((depth >= view.near) & (depth <= view.far))] = np.inf
        best = np.minimum(best, depth.min(axis=1))
    return best


def raycast_depth_oracle(mesh: TriangleMesh, view: CameraView, pixel) -> Optional[float]:
    """Eye-space depth of the nearest surface along the ray through ``pixel``.

    ``pixel`` is a continuous ``(u, v)`` coordinate; the center of array
    element ``[r, c]`` is ``(c + 0.5, r + 0.5)``. Hits outside the
    near/far range are ignored. Returns ``None`` when nothing is hit.
    """
    best = float(_oracle_depths(mesh, view, np.asarray(pixel, dtype=np.float64).reshape(1, 2))[0])
    return best if np.isfinite(best) else None


def raycast_depth_image(mesh: TriangleMesh, view: CameraView) -> np.ndarray:
    """Oracle depth (meters, NaN = no hit) at every pixel center."""
    cols, rows = np.meshgrid(np.arange(view.width) + 0.5, np.arange(view.height) + 0.5)
    uv = np.stack([cols.ravel(), rows.ravel()], axis=1)
    best = _oracle_depths(mesh, view, uv)
    best[~np.isfinite(best)] = np.nan
    return best.reshape(view.height, view.width)
