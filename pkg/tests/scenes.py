"""Small scene generators shared by several test modules."""

import numpy as np

from ffpverify.camera import make_camera, project_to_pixels
from ffpverify.render import TriangleMesh


def camera(width=64, height=64, fx=None, near=1.0, far=100.0, center=(0.0, 0.0, 0.0), rotation=None):
    """Camera at ``center`` looking down world -z unless ``rotation`` is given."""
    return make_camera(
        center=center,
        rotation=np.eye(3) if rotation is None else rotation,
        width=width,
        height=height,
        fx=fx or 0.8 * width,
        near=near,
        far=far,
    )


def random_mesh(rng, n_tri, view, depth=(3.0, 60.0), scale=0.3):
    """Triangles scattered through the frustum of a camera at the origin facing -z."""
    d = rng.uniform(*depth, size=n_tri)
    fx = view.projection[0, 0]
    half = d / fx  # half-extent per unit NDC
    x = rng.uniform(-1.1, 1.1, size=n_tri) * half * fx
    y = rng.uniform(-1.1, 1.1, size=n_tri) * half * fx
    centers = np.stack([x, y, -d], axis=1)
    offs = rng.normal(0, 1, size=(n_tri, 3, 3)) * (scale * d)[:, None, None]
    offs[..., 2] *= 0.3
    verts = centers[:, None, :] + offs
    verts[..., 2] = np.minimum(verts[..., 2], -1.5)
    mesh = TriangleMesh(verts.reshape(-1, 3), np.arange(3 * n_tri).reshape(-1, 3))
    return mesh.cleaned()


def edge_distance(mesh, view, reach=2.0):
    """Distance (px) from every pixel center to the nearest projected triangle edge.

    Exact up to ``reach``; pixels farther than that from every edge get inf.
    """
    uv, _ = project_to_pixels(view, mesh.vertices)
    h, w = view.height, view.width
    best = np.full((h, w), np.inf)
    for tri in mesh.triangles:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            (ax, ay), (bx, by) = uv[tri[a]], uv[tri[b]]
            c0 = max(int(np.floor(min(ax, bx) - reach)), 0)
            c1 = min(int(np.ceil(max(ax, bx) + reach)) + 1, w)
            r0 = max(int(np.floor(min(ay, by) - reach)), 0)
            r1 = min(int(np.ceil(max(ay, by) + reach)) + 1, h)
            if c0 >= c1 or r0 >= r1:
                continue
            px, py = np.meshgrid(np.arange(c0, c1) + 0.5, np.arange(r0, r1) + 0.5)
            dx, dy = bx - ax, by - ay
            den = dx * dx + dy * dy
            t = np.clip(((px - ax) * dx + (py - ay) * dy) / den, 0, 1) if den > 0 else 0.0
            d = np.hypot(px - ax - t * dx, py - ay - t * dy)
            np.minimum(best[r0:r1, c0:c1], np.where(d <= reach, d, np.inf), out=best[r0:r1, c0:c1])
    return best


def quad(corners):
    """Two-triangle mesh for four corners in loop order."""
    return TriangleMesh(np.asarray(corners, dtype=np.float64), [[0, 1, 2], [0, 2, 3]])


def compare_with_oracle(mesh, view, rendered, oracle, band=1.0):
    """Counts of hit/no-hit disagreements outside the edge band and the worst depth error."""
    far_from_edges = edge_distance(mesh, view) > band
    hit_r = rendered.hit
    hit_o = np.isfinite(oracle)
    mismatch = int(np.sum((hit_r != hit_o) & far_from_edges))
    both = hit_r & hit_o
    err = np.abs(rendered.metric()[both] - oracle[both]) if both.any() else np.zeros(1)
    return mismatch, float(err.max()), int(both.sum())
