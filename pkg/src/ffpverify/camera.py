"""Camera models, OpenGL-style projection and Brown lens distortion.

Conventions used everywhere in the package:

* matrices are stored row-major and act on column vectors,
* eye space looks down ``-z`` with ``+y`` up,
* normalized device coordinates (NDC) span ``[-1, 1]`` on each axis; the
  third axis is normalized depth with ``-1`` on the near plane,
* pixel coordinates are continuous with ``(0, 0)`` at the top-left corner of
  the image, so the center of array element ``[row, col]`` is at
  ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

import json
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import io
from .errors import DomainError, ParseError, PointAtCameraPlane, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_NEAR = 1.0
DEFAULT_FAR = 5000.0
_W_EPS = 1e-12
_ORTHO_TOL = 1e-6

AngleClass = Literal["nadir", "oblique"]


def _frozen(a, shape=None) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if shape is not None:
        a = a.reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BrownDistortion:
    """Radial (k1..k3) and tangential (p1, p2) lens distortion.

    Coefficients act on coordinates normalized by ``focal`` around
    ``principal_point``; all-zero coefficients give the identity mapping.
    """

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    principal_point: tuple[float, float] = (0.0, 0.0)
    focal: float = 1.0

    @property
    def is_identity(self) -> bool:
        return not any((self.k1, self.k2, self.k3, self.p1, self.p2))

    def displacement(self, u, v):
        """Distorted-minus-undistorted pixel offset at undistorted ``(u, v)``.

        Returned separately from the absolute position so that zero
        coefficients yield an exactly zero offset.
        """
        cx, cy = self.principal_point
        f = self.focal
        x = (np.asarray(u, dtype=np.float64) - cx) / f
        y = (np.asarray(v, dtype=np.float64) - cy) / f
        r2 = x * x + y * y
        radial = self.k1 * r2 + self.k2 * r2 * r2 + self.k3 * r2 * r2 * r2
        dx = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
        dy = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
        return f * dx, f * dy

    def distort(self, u, v):
        """Forward Brown model: undistorted pixel -> distorted pixel."""
        dx, dy = self.displacement(u, v)
        return np.asarray(u, dtype=np.float64) + dx, np.asarray(v, dtype=np.float64) + dy


@dataclass(frozen=True)
class CameraView:
    """One aerial photograph: pose, projection, distortion and frame size."""

    view: np.ndarray
    projection: np.ndarray
    width: int
    height: int
    distortion: BrownDistortion = field(default_factory=BrownDistortion)
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR
    view_id: str = "view"
    angle_class: AngleClass = "nadir"

    def __post_init__(self):
        object.__setattr__(self, "view", _frozen(self.view, (4, 4)))
        object.__setattr__(self, "projection", _frozen(self.projection, (4, 4)))
        if not (np.all(np.isfinite(self.view)) and np.all(np.isfinite(self.projection))):
            raise ValidationError(f"{self.view_id}: non-finite matrix entries")
        if abs(np.linalg.det(self.projection[:3, :3])) == 0.0:
            raise ValidationError(f"{self.view_id}: singular projection block")
        if not 0 < self.near < self.far:
            raise ValidationError(f"{self.view_id}: need 0 < near < far, got {self.near}, {self.far}")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"{self.view_id}: non-positive image size")
        if self.angle_class not in ("nadir", "oblique"):
            raise ValidationError(f"{self.view_id}: unknown angle class {self.angle_class!r}")

    @property
    def rotation(self) -> np.ndarray:
        """World-to-eye rotation block of the view matrix."""
        return self.view[:3, :3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.view[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        """Unit viewing direction (world frame)."""
        return -self.rotation[2]

    @property
    def mvp(self) -> np.ndarray:
        return self.projection @ self.view

    @property
    def focal_px(self) -> tuple[float, float]:
        return (
            self.projection[0, 0] * self.width / 2.0,
            self.projection[1, 1] * self.height / 2.0,
        )

    def eye_depth(self, points) -> np.ndarray:
        """Distance along the optical axis (meters) of world points ``(..., 3)``."""
        p = np.asarray(points, dtype=np.float64)
        return -(p @ self.view[2, :3] + self.view[2, 3])

    def gsd_at(self, depth: float) -> float:
        """Ground sample distance (m/px) of a fronto-parallel surface at ``depth``."""
        fx, fy = self.focal_px
        return depth * 2.0 / (fx + fy)


def perspective_from_intrinsics(fx, fy, cx, cy, width, height, near=DEFAULT_NEAR, far=DEFAULT_FAR):
    """OpenGL projection matrix reproducing a pinhole camera in pixel units.

    The principal point ``(cx, cy)`` uses the continuous top-left pixel
    convention of :func:`ndc_to_pixel`.
    """
    P = np.zeros((4, 4))
    P[0, 0] = 2.0 * fx / width
    P[0, 2] = 1.0 - 2.0 * cx / width
    P[1, 1] = 2.0 * fy / height
    P[1, 2] = 2.0 * cy / height - 1.0
    P[2, 2] = -(far + near) / (far - near)
    P[2, 3] = -2.0 * far * near / (far - near)
    P[3, 2] = -1.0
    return P


def view_from_pose(rotation, center) -> np.ndarray:
    """View matrix ``[R | -R c]`` from a world-to-eye rotation and camera center."""
    R = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    c = np.asarray(center, dtype=np.float64).reshape(3)
    V = np.eye(4)
    V[:3, :3] = R
    V[:3, 3] = -R @ c
    return V


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-eye rotation for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    s = np.cross(f, up)
    if np.linalg.norm(s) < 1e-9:
        raise ValidationError("look_at: up vector parallel to viewing direction")
    s /= np.linalg.norm(s)
    u = np.cross(s, f)
    return np.stack([s, u, -f])


def make_camera(
    *,
    center,
    rotation,
    width,
    height,
    fx,
    fy=None,
    cx=None,
    cy=None,
    near=DEFAULT_NEAR,
    far=DEFAULT_FAR,
    k=(0.0, 0.0, 0.0),
    p=(0.0, 0.0),
    view_id="view",
    angle_class: AngleClass = "nadir",
) -> CameraView:
    fy = fx if fy is None else fy
    cx = width / 2.0 if cx is None else cx
    cy = height / 2.0 if cy is None else cy
    dist = BrownDistortion(*k, *p, principal_point=(cx, cy), focal=fx)
    return CameraView(
        view=view_from_pose(rotation, center),
        projection=perspective_from_intrinsics(fx, fy, cx, cy, width, height, near, far),
        width=int(width),
        height=int(height),
        distortion=dist,
        near=near,
        far=far,
        view_id=view_id,
        angle_class=angle_class,
    )


def to_clip(view: CameraView, points) -> np.ndarray:
    """Homogeneous clip coordinates ``P V X~`` for world points ``(..., 3)``."""
    p = np.asarray(points, dtype=np.float64)
    h = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    return h @ view.mvp.T


def project_point(view: CameraView, x, *, return_flag: bool = False):
    """Project a world point to normalized screen space.

    Parameters
    ----------
    view : CameraView
    x : array_like, shape (3,) or (N, 3)
    return_flag : bool
        Also return whether each point lies inside the view frustum.

    Raises
    ------
    PointAtCameraPlane
        If the transformed homogeneous ``w`` is within 1e-12 of zero.
    """
    clip = to_clip(view, x)
    w = clip[..., 3:4]
    if np.any(np.abs(w) <= _W_EPS):
        raise PointAtCameraPlane("point lies on the camera plane (w ~ 0)")
    m = clip[..., :3] / w
    if not return_flag:
        return m
    inside = (w[..., 0] > 0) & np.all(np.abs(m) <= 1.0, axis=-1)
    return m, inside


def ndc_to_pixel(m, view: CameraView) -> np.ndarray:
    """Map NDC ``x, y`` to continuous pixel coordinates (row 0 at the top)."""
    m = np.asarray(m, dtype=np.float64)
    u = (m[..., 0] + 1.0) * 0.5 * view.width
    v = (1.0 - m[..., 1]) * 0.5 * view.height
    return np.stack([u, v], axis=-1)


def pixel_to_ndc(uv, view: CameraView) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    x = 2.0 * uv[..., 0] / view.width - 1.0
    y = 1.0 - 2.0 * uv[..., 1] / view.height
    return np.stack([x, y], axis=-1)


def project_to_pixels(view: CameraView, points):
    """World points -> (pixel coords, eye depth). No frustum test."""
    clip = to_clip(view, points)
    w = clip[..., 3]
    if np.any(np.abs(w) <= _W_EPS):
        raise PointAtCameraPlane("point lies on the camera plane (w ~ 0)")
    return ndc_to_pixel(clip[..., :3] / w[..., None], view), w


def depth_to_metric(z_ndc, view: CameraView):
    """Invert the perspective depth mapping; returns eye-space depth in meters."""
    z = np.asarray(z_ndc, dtype=np.float64)
    if np.any(~np.isfinite(z)) or np.any(np.abs(z) > 1.0):
        raise DomainError("normalized depth outside [-1, 1]")
    n, f = view.near, view.far
    out = 2.0 * n * f / (f + n - z * (f - n))
    return float(out) if out.ndim == 0 else out


def metric_to_depth(d, view: CameraView):
    """Forward mapping eye depth (m) -> normalized depth."""
    n, f = view.near, view.far
    d = np.asarray(d, dtype=np.float64)
    out = (f + n) / (f - n) - 2.0 * f * n / ((f - n) * d)
    return float(out) if out.ndim == 0 else out


def pixel_ray(view: CameraView, uv) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray (origin, unit direction) through continuous pixel ``uv``."""
    ndc = pixel_to_ndc(uv, view)
    inv = np.linalg.inv(view.mvp)
    pts = []
    for z in (-1.0, 1.0):
        h = np.concatenate([ndc, np.full(ndc.shape[:-1] + (1,), z), np.ones(ndc.shape[:-1] + (1,))], axis=-1)
        w = h @ inv.T
        pts.append(w[..., :3] / w[..., 3:4])
    d = pts[1] - pts[0]
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    origin = np.broadcast_to(view.center, d.shape).copy()
    return origin, d


# ----------------------------------------------------------------------------
# image sampling and undistortion


def bilinear_sample(image: np.ndarray, x, y, fill=0.0) -> np.ndarray:
    """Sample ``image`` (H, W[, C]) at array coordinates ``x`` (col), ``y`` (row).

    Samples whose 2x2 support leaves the image get ``fill``. Integer
    coordinates reproduce the input values exactly.
    """
    img = np.asarray(image)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h, w = img.shape[:2]
    x0 = np.floor(x)
    y0 = np.floor(y)
    tx = x - x0
    ty = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = np.where(tx > 0, x0 + 1, x0)
    y1 = np.where(ty > 0, y0 + 1, y0)
    valid = (x0 >= 0) & (y0 >= 0) & (x1 < w) & (y1 < h)
    xc0, xc1 = np.clip(x0, 0, w - 1), np.clip(x1, 0, w - 1)
    yc0, yc1 = np.clip(y0, 0, h - 1), np.clip(y1, 0, h - 1)
    src = img.astype(np.float64, copy=False)
    if img.ndim == 3:
        tx = tx[..., None]
        ty = ty[..., None]
    top = src[yc0, xc0] * (1.0 - tx) + src[yc0, xc1] * tx
    bot = src[yc1, xc0] * (1.0 - tx) + src[yc1, xc1] * tx
    out = top * (1.0 - ty) + bot * ty
    if img.ndim == 3:
        out = np.where(valid[..., None], out, fill)
    else:
        out = np.where(valid, out, fill)
    return out


def undistort_image(image: np.ndarray, d: BrownDistortion) -> np.ndarray:
    """Resample a distorted photograph onto the ideal pinhole grid.

    Destination-driven: each output pixel center is pushed through the Brown
    forward model and the source is sampled bilinearly there. Samples
    falling outside the source become zero.
    """
    img = np.asarray(image)
    if d.is_identity:
        return img.copy()
    h, w = img.shape[:2]
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dx, dy = d.displacement(cols + 0.5, rows + 0.5)
    out = bilinear_sample(img, cols + dx, rows + dy, fill=0.0)
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        out = np.clip(np.rint(out), info.min, info.max)
    return out.astype(img.dtype)


# ----------------------------------------------------------------------------
# pose files


_POSE_FIELDS = ("id", "width", "height", "fx", "fy", "cx", "cy", "rotation", "center")


def _check_rotation(R: np.ndarray, where: str) -> None:
    err = np.abs(R @ R.T - np.eye(3)).max()
    if not np.isfinite(err) or err > _ORTHO_TOL:
        raise ValidationError(f"{where}: rotation is not orthonormal (max |RR^T - I| = {err:.3g})")
    if np.linalg.det(R) < 0:
        raise ValidationError(f"{where}: rotation has negative determinant")


def camera_from_record(rec: dict, *, near=DEFAULT_NEAR, far=DEFAULT_FAR, index=None) -> CameraView:
    where = f"pose {rec.get('id', index)!r}"
    for key in _POSE_FIELDS:
        if key not in rec:
            raise ParseError(f"{where}: missing key", field=key)
    try:
        R = np.asarray(rec["rotation"], dtype=np.float64)
        c = np.asarray(rec["center"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: {exc}", field="rotation/center") from exc
    if R.size != 9:
        raise ParseError(f"{where}: rotation needs 9 values", field="rotation")
    if c.size != 3:
        raise ParseError(f"{where}: center needs 3 values", field="center")
    R = R.reshape(3, 3)
    _check_rotation(R, where)
    try:
        return make_camera(
            center=c,
            rotation=R,
            width=int(rec["width"]),
            height=int(rec["height"]),
            fx=float(rec["fx"]),
            fy=float(rec["fy"]),
            cx=float(rec["cx"]),
            cy=float(rec["cy"]),
            near=float(rec.get("near", near)),
            far=float(rec.get("far", far)),
            k=(float(rec.get("k1", 0.0)), float(rec.get("k2", 0.0)), float(rec.get("k3", 0.0))),
            p=(float(rec.get("p1", 0.0)), float(rec.get("p2", 0.0))),
            view_id=str(rec["id"]),
            angle_class=rec.get("angle_class", "nadir"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ParseError(f"{where}: {exc}") from exc


def camera_to_record(cam: CameraView) -> dict:
    fx, fy = cam.focal_px
    P = cam.projection
    cx = (1.0 - P[0, 2]) * cam.width / 2.0
    cy = (P[1, 2] + 1.0) * cam.height / 2.0
    d = cam.distortion
    return {
        "id": cam.view_id,
        "width": cam.width,
        "height": cam.height,
        "fx": float(fx),
        "fy": float(fy),
        "cx": float(cx),
        "cy": float(cy),
        "k1": d.k1,
        "k2": d.k2,
        "k3": d.k3,
        "p1": d.p1,
        "p2": d.p2,
        "rotation": [float(v) for v in cam.rotation.ravel()],
        "center": [float(v) for v in cam.center],
        "angle_class": cam.angle_class,
        "near": cam.near,
        "far": cam.far,
    }


def load_poses(path, *, near=DEFAULT_NEAR, far=DEFAULT_FAR) -> list[CameraView]:
    """Read cameras from a JSON pose file (or the XML subset, by extension)."""
    path = Path(path)
    if path.suffix.lower() == ".xml":
        return load_poses_xml(path, near=near, far=far)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(data, list):
        raise ParseError(f"{path}: top level must be an array")
    return [camera_from_record(rec, near=near, far=far, index=i) for i, rec in enumerate(data)]


def save_poses(path, cameras: Sequence[CameraView]) -> None:
    io.write_text(path, json.dumps([camera_to_record(c) for c in cameras], indent=1) + "\n")


def load_poses_xml(path, *, near=DEFAULT_NEAR, far=DEFAULT_FAR) -> list[CameraView]:
    """Import the supported subset of a BlockExchange-like XML file.

    Recognized layout::

        <Block><Photogroups><Photogroup>
          <ImageDimensions><Width/><Height/></ImageDimensions>
          <FocalLengthPixels/>            (or <FocalLength/> + <SensorSize/> in mm)
          <PrincipalPoint><x/><y/></PrincipalPoint>
          <Distortion><K1/><K2/><K3/><P1/><P2/></Distortion>
          <Photo><Id/><ImagePath/>
            <Pose><Rotation><M_00/>..<M_22/></Rotation><Center><x/><y/><z/></Center></Pose>
          </Photo>
        </Photogroup></Photogroups></Block>

    ``Rotation`` is world-to-camera with the camera looking down ``+z`` and
    ``y`` pointing down the image (photogrammetric convention); it is
    converted to the OpenGL eye frame on import. Photos whose ``ImagePath``
    contains ``nadir`` (case-insensitive) or that look within 20 degrees of
    straight down are tagged ``nadir``.
    """
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise ParseError(f"{path}: {exc}", line=exc.position[0]) from exc

    def num(node, tag, default=None):
        child = node.find(tag)
        if child is None or child.text is None:
            if default is None:
                raise ParseError(f"{path}: missing element", field=tag)
            return default
        try:
            return float(child.text)
        except ValueError as exc:
            raise ParseError(f"{path}: bad number {child.text!r}", field=tag) from exc

    flip = np.diag([1.0, -1.0, -1.0])
    cams = []
    for group in root.iter("Photogroup"):
        dims = group.find("ImageDimensions")
        if dims is None:
            raise ParseError(f"{path}: photogroup without ImageDimensions", field="ImageDimensions")
        w, h = int(num(dims, "Width")), int(num(dims, "Height"))
        if group.find("FocalLengthPixels") is not None:
            f = num(group, "FocalLengthPixels")
        else:
            f = num(group, "FocalLength") / num(group, "SensorSize") * max(w, h)
        pp = group.find("PrincipalPoint")
        cx = num(pp, "x") if pp is not None else w / 2.0
        cy = num(pp, "y") if pp is not None else h / 2.0
        dist = group.find("Distortion")
        coeffs = {k: (num(dist, k, 0.0) if dist is not None else 0.0) for k in ("K1", "K2", "K3", "P1", "P2")}
        for photo in group.iter("Photo"):
            pid = photo.findtext("Id")
            pose = photo.find("Pose")
            if pid is None or pose is None:
                raise ParseError(f"{path}: photo without Id/Pose", field="Photo")
            rot = pose.find("Rotation")
            ctr = pose.find("Center")
            if rot is None or ctr is None:
                raise ParseError(f"{path}: photo {pid} lacks Rotation/Center", field="Pose")
            R_cv = np.array([[num(rot, f"M_{i}{j}") for j in range(3)] for i in range(3)])
            _check_rotation(R_cv, f"photo {pid}")
            R = flip @ R_cv
            c = np.array([num(ctr, "x"), num(ctr, "y"), num(ctr, "z")])
            image_path = (photo.findtext("ImagePath") or "").lower()
            looking_down = -R[2] @ np.array([0.0, 0.0, -1.0]) > np.cos(np.radians(20.0))
            angle = "nadir" if ("nadir" in image_path or looking_down) else "oblique"
            cams.append(
                make_camera(
                    center=c,
                    rotation=R,
                    width=w,
                    height=h,
                    fx=f,
                    cx=cx,
                    cy=cy,
                    near=near,
                    far=far,
                    k=(coeffs["K1"], coeffs["K2"], coeffs["K3"]),
                    p=(coeffs["P1"], coeffs["P2"]),
                    view_id=str(pid),
                    angle_class=angle,
                )
            )
    return cams
