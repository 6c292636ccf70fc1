"""Face projection, homographic rectification and pixel-wise occlusion testing.

A face is rectified into its own plane frame (see :meth:`Face.frame`) at the
requested ground sample distance. The rendered scene depth is warped into
the same frame and compared with the face's own depth, obtained by bilinear
interpolation of its four corner depths; wherever the scene is nearer than
the face by more than the threshold the face is occluded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .camera import CameraView, bilinear_sample, project_to_pixels, to_clip
from .errors import DegenerateConfiguration, DimensionMismatch, PatchTooSmall, ValidationError
from .geometry import points_in_polygon, signed_area
from .lod1 import Face
from .render import DepthMap

OCCLUSION_THRESHOLD = 2.0  # meters
MAX_PATCH_SIDE = 1024
MIN_PATCH_SIDE = 8
INPUT_SIZE = 224


class BBox(NamedTuple):
    """Inclusive pixel box: columns ``x0..x1``, rows ``y0..y1``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def height(self) -> int:
        return self.y1 - self.y0 + 1


@dataclass(frozen=True)
class FaceProjection:
    face_id: str
    view_id: str
    pixels: np.ndarray
    area: float
    in_frustum: bool
    front_facing: bool = True
    visible_area: float = 0.0

    def with_visible_area(self, visible_area: float) -> "FaceProjection":
        return FaceProjection(
            self.face_id, self.view_id, self.pixels, self.area, self.in_frustum, self.front_facing, float(visible_area)
        )


def shoelace_area(pixels) -> float:
    return abs(signed_area(pixels))


def project_face(face: Face, view: CameraView) -> FaceProjection:
    """Project face vertices into ``view`` and measure the projected area."""
    clip = to_clip(view, face.vertices)
    in_front = bool(np.all(clip[:, 2] >= -clip[:, 3]) and np.all(clip[:, 3] > 0))
    to_cam = view.center - face.vertices.mean(axis=0)
    front = bool(np.dot(face.normal, to_cam) > 0)
    if not in_front:
        return FaceProjection(face.face_id, view.view_id, np.full((len(face.vertices), 2), np.nan), 0.0, False, front)
    pix, _ = project_to_pixels(view, face.vertices)
    lo, hi = pix.min(axis=0), pix.max(axis=0)
    overlaps = bool(hi[0] > 0 and hi[1] > 0 and lo[0] < view.width and lo[1] < view.height)
    return FaceProjection(face.face_id, view.view_id, pix, shoelace_area(pix), overlaps, front)


# ----------------------------------------------------------------------------
# homography


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, scaled so the bottom-right entry is 1 when nonzero."""

    matrix: np.ndarray

    def __post_init__(self):
        H = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(H[2, 2]) > 1e-15:
            H = H / H[2, 2]
        if not abs(np.linalg.det(H)) > 1e-12:
            raise DegenerateConfiguration("homography is not invertible")
        H.setflags(write=False)
        object.__setattr__(self, "matrix", H)

    def apply(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        h = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1) @ self.matrix.T
        return h[..., :2] / h[..., 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _check_spread(pts: np.ndarray, tol=1e-9) -> None:
    span = np.ptp(pts, axis=0).max()
    if span == 0:
        raise DegenerateConfiguration("correspondences coincide")
    q = (pts - pts[0]) / span
    best = 0.0
    for i in range(1, len(q)):
        cross = q[i, 0] * q[1:, 1] - q[i, 1] * q[1:, 0]
        best = max(best, float(np.abs(cross).max()))
    if best <= tol:
        raise DegenerateConfiguration("correspondences are collinear")


def dlt_homography(src, dst) -> Homography:
    """Least-squares DLT (with Hartley normalization) mapping ``src`` to ``dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValidationError("src and dst must both be (N, 2)")
    if len(src) < 4:
        raise DegenerateConfiguration("need at least 4 correspondences")
    _check_spread(src)
    _check_spread(dst)
    Ts, Td = _normalizer(src), _normalizer(dst)
    s = np.column_stack([src, np.ones(len(src))]) @ Ts.T
    d = np.column_stack([dst, np.ones(len(dst))]) @ Td.T
    rows = []
    for (x, y, _), (u, v, _) in zip(s, d):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    Hn = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(Td) @ Hn @ Ts)


@dataclass(frozen=True)
class RectifiedFrame:
    """Plane frame of a face plus the output raster size and pixel scales."""

    origin: np.ndarray
    e_u: np.ndarray
    e_v: np.ndarray
    width_m: float
    height_m: float
    out_w: int
    out_h: int

    @property
    def scale(self) -> tuple[float, float]:
        return self.out_w / self.width_m, self.out_h / self.height_m

    def corners_3d(self) -> np.ndarray:
        """Top-left, top-right, bottom-left, bottom-right corners (world)."""
        o, u, v = self.origin, self.e_u * self.width_m, self.e_v * self.height_m
        return np.array([o, o + u, o + v, o + u + v])

    def to_pixels(self, points) -> np.ndarray:
        rel = np.asarray(points, dtype=np.float64) - self.origin
        su, sv = self.scale
        return np.stack([rel @ self.e_u * su, rel @ self.e_v * sv], axis=-1)


def rectified_frame(face: Face, gsd: float, max_side: int = MAX_PATCH_SIDE) -> RectifiedFrame:
    if not gsd > 0:
        raise ValidationError("gsd must be positive")
    origin, e_u, e_v, w, h = face.frame()
    out_w = min(max(1, math.ceil(w / gsd - 1e-9)), max_side)
    out_h = min(max(1, math.ceil(h / gsd - 1e-9)), max_side)
    return RectifiedFrame(origin, e_u, e_v, w, h, out_w, out_h)


def compute_homography(face: Face, view: CameraView, gsd: float, frame: Optional[RectifiedFrame] = None) -> Homography:
    """Homography from image pixels of ``view`` to the face's rectified pixels."""
    frame = frame or rectified_frame(face, gsd)
    pts3 = np.concatenate([frame.corners_3d(), face.vertices])
    clip = to_clip(view, pts3)
    if np.any(clip[:, 3] <= 0):
        raise DegenerateConfiguration(f"{face.face_id}: face extends behind camera {view.view_id}")
    img, _ = project_to_pixels(view, pts3)
    return dlt_homography(img, frame.to_pixels(pts3))


# ----------------------------------------------------------------------------
# warping


def warp_image(image: np.ndarray, h: Homography, out_size, fill=np.nan) -> np.ndarray:
    """Destination-driven bilinear warp; ``h`` maps source pixels to destination."""
    out_w, out_h = out_size
    cols, rows = np.meshgrid(np.arange(out_w) + 0.5, np.arange(out_h) + 0.5)
    src = h.inverse().apply(np.stack([cols, rows], axis=-1))
    return bilinear_sample(image, src[..., 0] - 0.5, src[..., 1] - 0.5, fill=fill)


def rectify_patch(color: np.ndarray, depth, h: Homography, out_size):
    """Warp color and depth into the rectified frame.

    ``depth`` may be a :class:`DepthMap` (converted to meters first) or an
    array already in meters. Returns ``(color, depth_m, valid)``; invalid
    pixels have NaN depth and NaN color.
    """
    depth_m = depth.metric() if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    col = warp_image(np.asarray(color), h, out_size, fill=np.nan)
    dep = warp_image(depth_m, h, out_size, fill=np.nan)
    valid = np.isfinite(dep)
    if col.ndim == 3:
        valid &= np.all(np.isfinite(col), axis=-1)
    else:
        valid &= np.isfinite(col)
    return col, dep, valid


def bilinear_surface(corners, s, t):
    """Bilinear blend of corners (TL, TR, BL, BR) at fractional ``(s, t)``."""
    tl, tr, bl, br = (float(c) for c in corners)
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    return (1 - s) * (1 - t) * tl + s * (1 - t) * tr + (1 - s) * t * bl + s * t * br


def interpolate_face_depth(corner_depths, out_size) -> np.ndarray:
    """Expected face depth at rectified pixel centers from four corner depths.

    ``corner_depths`` are ordered top-left, top-right, bottom-left,
    bottom-right; ``out_size`` is ``(width, height)``.
    """
    c = np.asarray(corner_depths, dtype=np.float64)
    if c.shape != (4,) or not np.all(np.isfinite(c)):
        raise ValidationError("need four finite corner depths")
    out_w, out_h = out_size
    s = (np.arange(out_w) + 0.5) / out_w
    t = (np.arange(out_h) + 0.5) / out_h
    return bilinear_surface(c, s[None, :], t[:, None])


def occlusion_mask(expected, rendered, threshold: float = OCCLUSION_THRESHOLD) -> np.ndarray:
    """Visibility mask: False where the scene is nearer than the face by > threshold.

    Pixels without a rendered depth (NaN) count as occluded.
    """
    expected = np.asarray(expected, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    if expected.shape != rendered.shape:
        raise DimensionMismatch(f"expected {expected.shape} vs rendered {rendered.shape}")
    with np.errstate(invalid="ignore"):
        occluded = (expected - rendered) > threshold
    return ~occluded & np.isfinite(rendered)


def visible_bbox(mask) -> Optional[BBox]:
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return None
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


# ----------------------------------------------------------------------------
# samples


@dataclass(frozen=True)
class PatchSample:
    color: np.ndarray
    depth: np.ndarray
    expected: np.ndarray
    mask: np.ndarray
    bbox: Optional[BBox]
    building_id: str
    face_id: str
    kind: str
    view_id: str
    projected_area: float = 0.0
    visible_area: float = 0.0
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = self.mask.shape
        if self.color.shape[:2] != shape or self.depth.shape != shape or self.expected.shape != shape:
            raise DimensionMismatch("patch rasters must share dimensions")

    @property
    def sample_id(self) -> str:
        return f"{self.face_id}@{self.view_id}"


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize (edges clamped)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    y = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    x = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    xx, yy = np.meshgrid(x, y)
    return bilinear_sample(img, xx, yy, fill=0.0)


def normalize_depth(depth, mask) -> np.ndarray:
    """Min-max scale visible depths to [0, 1]; occluded pixels and flat patches give 0."""
    d = np.asarray(depth, dtype=np.float64)
    m = np.asarray(mask, dtype=bool) & np.isfinite(d)
    out = np.zeros(d.shape)
    if not m.any():
        return out
    lo, hi = d[m].min(), d[m].max()
    if hi > lo:
        out[m] = (d[m] - lo) / (hi - lo)
    return out


def assemble_sample(patch: PatchSample, target: int = INPUT_SIZE) -> np.ndarray:
    """Crop to the visible box and build the (4, target, target) classifier input.

    Channels are RGB scaled to [0, 1] followed by min-max normalized depth.
    """
    box = patch.bbox if patch.bbox is not None else visible_bbox(patch.mask)
    if box is None or box.width < MIN_PATCH_SIDE or box.height < MIN_PATCH_SIDE:
        raise PatchTooSmall(f"{patch.sample_id}: visible box {box} below {MIN_PATCH_SIDE} px")
    sl = (slice(box.y0, box.y1 + 1), slice(box.x0, box.x1 + 1))
    color = np.nan_to_num(np.asarray(patch.color, dtype=np.float64)[sl], nan=0.0)
    if color.ndim == 2:
        color = np.repeat(color[..., None], 3, axis=-1)
    if np.asarray(patch.color).dtype == np.uint8 or color.max(initial=0.0) > 1.0:
        color = color / 255.0
    depth = normalize_depth(patch.depth[sl], patch.mask[sl])
    stack = np.concatenate([color, depth[..., None]], axis=-1)
    if stack.shape[:2] != (target, target):
        stack = resize_bilinear(stack, target, target)
    return np.ascontiguousarray(stack.transpose(2, 0, 1), dtype=np.float32)


def extract_patch(
    face: Face,
    view: CameraView,
    color: np.ndarray,
    depth: DepthMap,
    gsd: float,
    threshold: float = OCCLUSION_THRESHOLD,
    max_side: int = MAX_PATCH_SIDE,
    labels: Optional[np.ndarray] = None,
):
    """Rectify one (face, view) pair and run the occlusion test.

    Returns ``(projection, sample)``; ``sample`` is None when the face is
    outside the frustum, back-facing or fully occluded. A per-pixel
    ``labels`` image, when given, is warped with nearest sampling into
    ``sample.labels``.
    """
    proj = project_face(face, view)
    if not (proj.in_frustum and proj.front_facing) or proj.area <= 0:
        return proj, None
    frame = rectified_frame(face, gsd, max_side)
    try:
        H = compute_homography(face, view, gsd, frame)
    except DegenerateConfiguration:
        return proj, None
    size = (frame.out_w, frame.out_h)
    col, dep, _ = rectify_patch(color, depth, H, size)
    corner_depths = view.eye_depth(frame.corners_3d())
    expected = interpolate_face_depth(corner_depths, size)
    cols, rows = np.meshgrid(np.arange(frame.out_w) + 0.5, np.arange(frame.out_h) + 0.5)
    interior = points_in_polygon(cols, rows, frame.to_pixels(face.vertices))
    visible = occlusion_mask(expected, dep, threshold) & interior
    n_interior = int(interior.sum())
    vis_area = proj.area * visible.sum() / n_interior if n_interior else 0.0
    proj = proj.with_visible_area(vis_area)
    box = visible_bbox(visible)
    if box is None:
        return proj, None
    sample = PatchSample(
        color=col,
        depth=dep,
        expected=expected,
        mask=visible,
        bbox=box,
        building_id=face.building_id,
        face_id=face.face_id,
        kind=face.kind,
        view_id=view.view_id,
        projected_area=proj.area,
        visible_area=vis_area,
        labels=None if labels is None else warp_labels(labels, H, size),
    )
    return proj, sample


def warp_labels(labels: np.ndarray, h: Homography, out_size) -> np.ndarray:
    """Nearest-neighbour warp of an integer label image (-1 outside)."""
    out_w, out_h = out_size
    cols, rows = np.meshgrid(np.arange(out_w) + 0.5, np.arange(out_h) + 0.5)
    src = h.inverse().apply(np.stack([cols, rows], axis=-1))
    c = np.floor(src[..., 0]).astype(np.int64)
    r = np.floor(src[..., 1]).astype(np.int64)
    lab = np.asarray(labels)
    ok = (c >= 0) & (r >= 0) & (c < lab.shape[1]) & (r < lab.shape[0])
    out = np.full((out_h, out_w), -1, dtype=np.int64)
    out[ok] = lab[r[ok], c[ok]]
    return out
