"""Planar polygon utilities used by extrusion, rendering and patch extraction."""

from __future__ import annotations

import numpy as np
from shapely.geometry import LinearRing


def signed_area(poly) -> float:
    """Shoelace area; positive for counter-clockwise rings."""
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def is_simple(poly) -> bool:
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return False
    return bool(LinearRing(p).is_simple) and abs(signed_area(p)) > 0


def points_in_polygon(px, py, poly) -> np.ndarray:
    """Even-odd point-in-polygon test, vectorized over query points."""
    p = np.asarray(poly, dtype=np.float64)
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    inside = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    n = len(p)
    for i in range(n):
        x1, y1 = p[i]
        x2, y2 = p[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > py) != (y2 > py)
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def triangulate_polygon(poly) -> list[tuple[int, int, int]]:
    """Ear-clipping triangulation of a simple 2D polygon (either orientation)."""
    p = np.asarray(poly, dtype=np.float64)
    idx = list(range(len(p)))
    if signed_area(p) < 0:
        idx.reverse()
    tris = []

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    guard = 0
    while len(idx) > 3 and guard < 10 * len(p) ** 2:
        guard += 1
        n = len(idx)
        for k in range(n):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % n]
            a, b, c = p[i0], p[i1], p[i2]
            if cross(a, b, c) <= 0:
                continue
            ear = True
            for j in idx:
                if j in (i0, i1, i2):
                    continue
                q = p[j]
                if cross(a, b, q) >= 0 and cross(b, c, q) >= 0 and cross(c, a, q) >= 0:
                    ear = False
                    break
            if ear:
                tris.append((i0, i1, i2))
                idx.pop(k)
                break
        else:
            break
    if len(idx) == 3:
        tris.append(tuple(idx))
    return tris


def convex_hull(points) -> np.ndarray:
    """Monotone-chain hull, counter-clockwise, no repeated endpoint."""
    pts = sorted(map(tuple, np.asarray(points, dtype=np.float64)))
    if len(pts) <= 2:
        return np.asarray(pts)

    def half(seq):
        out = []
        for q in seq:
            while len(out) >= 2:
                o, a = out[-2], out[-1]
                if (a[0] - o[0]) * (q[1] - o[1]) - (a[1] - o[1]) * (q[0] - o[0]) > 0:
                    break
                out.pop()
            out.append(q)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return np.asarray(lower[:-1] + upper[:-1])


def min_area_rect(points):
    """Minimum-area enclosing rectangle.

    Returns ``(axes, lo, hi)`` where ``axes`` is a (2, 2) array of orthonormal
    row vectors and ``lo``/``hi`` are the extents of the points projected on
    them.
    """
    hull = convex_hull(points)
    best = None
    for i in range(len(hull)):
        e = hull[(i + 1) % len(hull)] - hull[i]
        length = np.hypot(*e)
        if length == 0:
            continue
        a = e / length
        axes = np.array([a, [-a[1], a[0]]])
        proj = hull @ axes.T
        lo, hi = proj.min(axis=0), proj.max(axis=0)
        area = float(np.prod(hi - lo))
        if best is None or area < best[0] - 1e-12:
            best = (area, axes, lo, hi)
    return best[1], best[2], best[3]


def point_segment_distance(px, py, a, b) -> np.ndarray:
    """Distance from points to segment ``a``-``b`` (vectorized over points)."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    den = dx * dx + dy * dy
    if den == 0:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / den, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))
