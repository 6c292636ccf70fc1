"""Ground filtering of height grids and LOD-1 extrusion of 2D footprints."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from . import io
from .errors import DegenerateHeight, EmptyGrid, NoCoverage, ParseError, ValidationError
from .geometry import is_simple, min_area_rect, points_in_polygon, signed_area

FLOOR_HEIGHT = 3.0  # meters per storey for the floor-count fallback


@dataclass(frozen=True)
class Footprint:
    building_id: str
    polygon: np.ndarray
    floors: Optional[int] = None

    def __post_init__(self):
        p = np.asarray(self.polygon, dtype=np.float64).reshape(-1, 2)
        # drop the closing vertex and any repeated consecutive vertices
        keep = np.any(p != np.roll(p, -1, axis=0), axis=1) if len(p) > 1 else np.ones(len(p), bool)
        p = p[keep]
        if len(p) < 3:
            raise ValidationError(f"footprint {self.building_id}: needs >= 3 vertices")
        if not is_simple(p):
            raise ValidationError(f"footprint {self.building_id}: polygon is not simple")
        if signed_area(p) < 0:
            p = p[::-1]
        p = np.ascontiguousarray(p)
        p.setflags(write=False)
        object.__setattr__(self, "polygon", p)
        if self.floors is not None and (int(self.floors) != self.floors or self.floors < 1):
            raise ValidationError(f"footprint {self.building_id}: floors must be an integer >= 1")

    @property
    def area(self) -> float:
        return signed_area(self.polygon)


@dataclass(frozen=True)
class HeightGrid:
    """Regular elevation raster; row 0 is the southern edge, NaN marks holes."""

    values: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)
    cell_size: float = 1.0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError("height grid must be 2D")
        if not self.cell_size > 0:
            raise ValidationError("cell size must be positive")
        if np.any(np.isinf(v)):
            raise ValidationError("height grid has infinite elevations")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self):
        return self.values.shape

    def cell_centers(self):
        rows, cols = self.shape
        x = self.origin[0] + (np.arange(cols) + 0.5) * self.cell_size
        y = self.origin[1] + (np.arange(rows) + 0.5) * self.cell_size
        return np.meshgrid(x, y)

    def with_values(self, values) -> "HeightGrid":
        return HeightGrid(values, self.origin, self.cell_size)

    def translated(self, dx, dy, dz=0.0) -> "HeightGrid":
        return HeightGrid(self.values + dz, (self.origin[0] + dx, self.origin[1] + dy), self.cell_size)


@dataclass(frozen=True)
class GroundFilterParams:
    max_object_size: float = 200.0
    min_window: float = 10.0
    threshold: float = 0.2

    def __post_init__(self):
        if not (self.max_object_size > 0 and self.min_window > 0 and self.threshold > 0):
            raise ValidationError("ground filter parameters must be positive")
        if self.min_window > self.max_object_size:
            raise ValidationError("minimum window exceeds maximum object size")


def window_sizes(params: GroundFilterParams, cell_size: float) -> list[int]:
    """Odd window widths (cells) doubling from the minimum window to the max object size."""
    meters = []
    w = params.min_window
    while w < params.max_object_size:
        meters.append(w)
        w *= 2.0
    meters.append(params.max_object_size)
    cells = []
    for m in meters:
        n = max(1, int(round(m / cell_size)))
        if n % 2 == 0:
            n += 1
        if not cells or cells[-1] != n:
            cells.append(n)
    return cells


def _fill_holes(z: np.ndarray) -> np.ndarray:
    holes = ~np.isfinite(z)
    if not holes.any():
        return z.copy()
    _, (ri, ci) = ndimage.distance_transform_edt(holes, return_indices=True)
    return z[ri, ci]


def filter_ground(grid: HeightGrid, params: GroundFilterParams = GroundFilterParams()):
    """Progressive morphological ground filter.

    The surface is opened with square windows growing from
    ``params.min_window`` to ``params.max_object_size``; a cell becomes
    non-ground as soon as one opening lowers it by more than
    ``params.threshold``. The final opened surface is returned as the ground
    estimate, which fills non-ground cells from their surroundings.

    Returns
    -------
    ground : HeightGrid
    mask : ndarray of bool
        True where the cell is classified as ground.
    """
    z = grid.values
    if z.size == 0 or not np.isfinite(z).any():
        raise EmptyGrid("height grid has no valid cells")
    holes = ~np.isfinite(z)
    surface = _fill_holes(z)
    nonground = np.zeros(z.shape, dtype=bool)
    for n in window_sizes(params, grid.cell_size):
        opened = ndimage.grey_opening(surface, size=(n, n), mode="nearest")
        nonground |= (surface - opened) > params.threshold
        surface = opened
    return grid.with_values(surface), ~(nonground | holes)


class GroundFilter(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`filter_ground`.

    ``transform`` accepts a :class:`HeightGrid` (or a bare 2D array, read with
    ``cell_size``) and returns the ground surface; the ground mask of the
    last call is kept in ``ground_mask_``.
    """

    def __init__(self, max_object_size=200.0, min_window=10.0, threshold=0.2, cell_size=1.0):
        self.max_object_size = max_object_size
        self.min_window = min_window
        self.threshold = threshold
        self.cell_size = cell_size

    def _params(self):
        return GroundFilterParams(self.max_object_size, self.min_window, self.threshold)

    def fit(self, X, y=None):
        self.params_ = self._params()
        self.windows_ = window_sizes(self.params_, self._as_grid(X).cell_size)
        return self

    def _as_grid(self, X):
        return X if isinstance(X, HeightGrid) else HeightGrid(np.asarray(X, dtype=np.float64), cell_size=self.cell_size)

    def transform(self, X):
        grid = self._as_grid(X)
        ground, mask = filter_ground(grid, getattr(self, "params_", None) or self._params())
        self.ground_mask_ = mask
        return ground if isinstance(X, HeightGrid) else ground.values


# ----------------------------------------------------------------------------
# extrusion


@dataclass(frozen=True)
class Face:
    """Planar polygon of an extruded building, with outward unit normal."""

    face_id: str
    building_id: str
    kind: Literal["roof", "facade"]
    vertices: np.ndarray
    normal: np.ndarray
    edge: Optional[tuple] = None

    def frame(self):
        """In-plane rectangle covering the face.

        Returns ``(origin, e_u, e_v, width, height)``: ``origin`` is the
        top-left corner, ``e_u`` points right and ``e_v`` down as seen from
        outside the face, and ``width``/``height`` are extents in meters.
        Façades map exactly onto their quad; roofs use the minimum-area
        bounding rectangle.
        """
        v = self.vertices
        n = self.normal
        if self.kind == "facade":
            e_u = v[1] - v[0]
            e_u = e_u / np.linalg.norm(e_u)
        else:
            axes, _, _ = min_area_rect(v[:, :2])
            cands = [np.array([a[0], a[1], 0.0]) * s for a in axes for s in (1.0, -1.0)]
            e_u = max(cands, key=lambda c: (round(c[0], 12), round(c[1], 12)))
        e_v = np.cross(e_u, n)
        rel = v - v[0]
        uu = rel @ e_u
        vv = rel @ e_v
        origin = v[0] + uu.min() * e_u + vv.min() * e_v
        return origin, e_u, e_v, float(uu.max() - uu.min()), float(vv.max() - vv.min())

    def plane_coords(self) -> np.ndarray:
        """Face vertices in the (u, v) meters of :meth:`frame`."""
        origin, e_u, e_v, _, _ = self.frame()
        rel = self.vertices - origin
        return np.stack([rel @ e_u, rel @ e_v], axis=1)

    def area(self) -> float:
        return abs(signed_area(self.plane_coords()))


@dataclass(frozen=True)
class Lod1Building:
    building_id: str
    footprint: np.ndarray
    base: float
    roof: float

    def __post_init__(self):
        if not self.roof > self.base:
            raise DegenerateHeight(f"building {self.building_id}: roof {self.roof} <= base {self.base}")
        p = np.asarray(self.footprint, dtype=np.float64)
        p.setflags(write=False)
        object.__setattr__(self, "footprint", p)

    @property
    def height(self) -> float:
        return self.roof - self.base

    @property
    def roof_face(self) -> np.ndarray:
        p = self.footprint
        return np.column_stack([p, np.full(len(p), self.roof)])

    @property
    def facades(self) -> list[tuple[np.ndarray, tuple]]:
        """One vertical quad per footprint edge, ordered base-a, base-b, roof-b, roof-a."""
        p = self.footprint
        out = []
        for i in range(len(p)):
            a, b = p[i], p[(i + 1) % len(p)]
            quad = np.array(
                [[a[0], a[1], self.base], [b[0], b[1], self.base], [b[0], b[1], self.roof], [a[0], a[1], self.roof]]
            )
            out.append((quad, (tuple(a), tuple(b))))
        return out

    def to_dict(self) -> dict:
        return {
            "id": self.building_id,
            "footprint": self.footprint.tolist(),
            "base": self.base,
            "roof": self.roof,
        }

    @classmethod
    def from_dict(cls, d) -> "Lod1Building":
        return cls(str(d["id"]), np.asarray(d["footprint"], dtype=np.float64), float(d["base"]), float(d["roof"]))


def _inside_values(grid: HeightGrid, polygon) -> np.ndarray:
    xs, ys = grid.cell_centers()
    inside = points_in_polygon(xs, ys, polygon)
    vals = grid.values[inside]
    return vals[np.isfinite(vals)]


def _nearest_value(grid: HeightGrid, point) -> Optional[float]:
    vals = grid.values
    finite = np.isfinite(vals)
    if not finite.any():
        return None
    xs, ys = grid.cell_centers()
    d = np.hypot(xs - point[0], ys - point[1])
    d[~finite] = np.inf
    return float(vals.flat[int(np.argmin(d))])


def extrude_footprint(fp: Footprint, surface: HeightGrid, ground: HeightGrid, floor_height=FLOOR_HEIGHT) -> Lod1Building:
    """Extrude a footprint between the lowest ground and the mean surface height.

    Without any surface cell center inside the footprint the roof falls back
    to ``base + floors * floor_height``; missing floors then raise
    :class:`NoCoverage`.
    """
    roof_vals = _inside_values(surface, fp.polygon)
    ground_vals = _inside_values(ground, fp.polygon)
    if ground_vals.size:
        base = float(ground_vals.min())
    else:
        base = _nearest_value(ground, fp.polygon.mean(axis=0))
        if base is None:
            raise NoCoverage(f"building {fp.building_id}: no ground elevation available")
    if roof_vals.size:
        roof = float(roof_vals.mean())
    elif fp.floors:
        roof = base + fp.floors * floor_height
    else:
        raise NoCoverage(f"building {fp.building_id}: no surface cell inside footprint and no floor count")
    if not roof > base:
        raise DegenerateHeight(f"building {fp.building_id}: roof {roof:.3f} <= base {base:.3f}")
    return Lod1Building(fp.building_id, fp.polygon, base, roof)


def enumerate_faces(b: Lod1Building) -> list[Face]:
    """Roof face first, then one façade per footprint edge in ring order."""
    faces = [Face(f"{b.building_id}/roof", b.building_id, "roof", b.roof_face, np.array([0.0, 0.0, 1.0]))]
    for i, (quad, edge) in enumerate(b.facades):
        (ax, ay), (bx, by) = edge
        n = np.array([by - ay, -(bx - ax), 0.0])
        n /= np.linalg.norm(n)
        faces.append(Face(f"{b.building_id}/facade{i}", b.building_id, "facade", quad, n, edge))
    return faces


# ----------------------------------------------------------------------------
# files


def load_footprints(path) -> list[Footprint]:
    """Footprints from a GeoJSON FeatureCollection of simple polygons."""
    data = io.read_json(path)
    if data.get("type") != "FeatureCollection":
        raise ParseError(f"{path}: expected a FeatureCollection", field="type")
    out = []
    for k, feat in enumerate(data.get("features", [])):
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        bid = props.get("id")
        if bid is None:
            raise ParseError(f"{path}: feature {k} has no id", field="properties.id")
        if geom.get("type") != "Polygon":
            raise ValidationError(f"{path}: feature {bid} geometry must be a Polygon")
        rings = geom.get("coordinates") or []
        if len(rings) != 1:
            raise ValidationError(f"{path}: feature {bid} has holes or no exterior ring")
        floors = props.get("floors")
        out.append(Footprint(str(bid), np.asarray(rings[0], dtype=np.float64)[:, :2], None if floors is None else int(floors)))
    return out


def save_footprints(path, footprints) -> None:
    feats = []
    for fp in footprints:
        ring = fp.polygon.tolist() + [fp.polygon[0].tolist()]
        props = {"id": fp.building_id}
        if fp.floors is not None:
            props["floors"] = fp.floors
        feats.append({"type": "Feature", "properties": props, "geometry": {"type": "Polygon", "coordinates": [ring]}})
    io.write_json(path, {"type": "FeatureCollection", "features": feats})


def save_height_grid(path, grid: HeightGrid) -> None:
    path = Path(path)
    io.write_pfm(path, grid.values.astype(np.float32))
    io.write_json(path.with_suffix(".json"), {"origin": list(grid.origin), "cell_size": grid.cell_size, "nodata": "nan"})


def load_height_grid(path) -> HeightGrid:
    path = Path(path)
    meta = io.read_json(path.with_suffix(".json"))
    return HeightGrid(io.read_pfm(path).astype(np.float64), tuple(meta["origin"]), float(meta["cell_size"]))


def roof_height_stats(grid: HeightGrid, polygon) -> tuple[float, int]:
    vals = _inside_values(grid, polygon)
    return (float(vals.mean()) if vals.size else math.nan), int(vals.size)
