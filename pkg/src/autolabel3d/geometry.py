"""Poses, pinhole projection, template meshes and point-to-surface distances.

Frames follow the KITTI rectified camera convention: x right, y down, z
forward. A 4-DoF pose rotates about the camera y axis with the KITTI
``rotation_y`` sign convention and then translates.

Canonical template frame: length along z (front at +z), width along x,
height along y, tight box centred on the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

TWO_PI = 2.0 * math.pi


class BehindCameraError(ValueError):
    """Raised when a point with non-positive depth is projected."""


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def wrap_2pi(angle):
    """Map an angle (scalar or array) into [0, 2*pi)."""
    out = np.mod(angle, TWO_PI)
    # np.mod returns 2*pi for tiny negative inputs
    out = np.where(out >= TWO_PI, 0.0, out)
    return float(out) if out.ndim == 0 else out


def wrap_pi(angle):
    """Map an angle (scalar or array) into [-pi, pi)."""
    out = wrap_2pi(np.asarray(angle) + math.pi) - math.pi
    return float(out) if np.ndim(out) == 0 else out


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class CameraCalibration:
    projection: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self):
        p = _frozen(self.projection)
        if p.shape != (3, 4):
            raise ValueError(f"projection must be 3x4, got {p.shape}")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        if np.linalg.matrix_rank(p) != 3:
            raise ValueError("projection matrix must have rank 3")
        object.__setattr__(self, "projection", p)


@dataclass(frozen=True)
class Pose4DoF:
    """Yaw about the camera y axis followed by a translation (metres)."""

    yaw: float
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = _frozen(self.translation).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "yaw", wrap_2pi(float(self.yaw)))

    @property
    def rotation(self) -> np.ndarray:
        return yaw_matrix(self.yaw)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose4DoF":
        return Pose4DoF(-self.yaw, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose4DoF") -> "Pose4DoF":
        """self * other (apply ``other`` first)."""
        return Pose4DoF(self.yaw + other.yaw, self.rotation @ other.translation + self.translation)


def apply_pose(pose: Pose4DoF, points) -> np.ndarray:
    """Map points X -> R(yaw) X + T."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ pose.rotation.T + pose.translation


def inverse_apply_pose(pose: Pose4DoF, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return (pts - pose.translation) @ pose.rotation


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    frame: str = "camera"

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if self.frame not in ("sensor", "camera"):
            raise ValueError(f"unknown frame tag {self.frame!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class Mask2D:
    bitmap: np.ndarray  # (height, width) bool
    score: float = 1.0

    def __post_init__(self):
        b = _frozen(self.bitmap, dtype=bool)
        if b.ndim != 2:
            raise ValueError("mask bitmap must be 2-D")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("mask score must lie in [0, 1]")
        object.__setattr__(self, "bitmap", b)

    @property
    def height(self) -> int:
        return self.bitmap.shape[0]

    @property
    def width(self) -> int:
        return self.bitmap.shape[1]

    @property
    def area(self) -> int:
        return int(self.bitmap.sum())


@dataclass(frozen=True)
class OrientedBox3D:
    """Box by geometric centre, (length, width, height) and yaw.

    Length runs along the heading direction (sin yaw, 0, cos yaw), width along
    the camera x axis at yaw 0, height along y.
    """

    centre: np.ndarray
    dims: np.ndarray
    yaw: float
    score: float = 1.0

    def __post_init__(self):
        c = _frozen(self.centre).reshape(3)
        d = _frozen(self.dims).reshape(3)
        if np.any(d <= 0):
            raise ValueError(f"box dimensions must be positive, got {d}")
        object.__setattr__(self, "centre", c)
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "yaw", wrap_pi(float(self.yaw)))

    @property
    def length(self) -> float:
        return float(self.dims[0])

    @property
    def width(self) -> float:
        return float(self.dims[1])

    @property
    def height(self) -> float:
        return float(self.dims[2])

    def corners(self) -> np.ndarray:
        """The 8 corners, shape (8, 3)."""
        l, w, h = self.dims
        sx = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * w / 2
        sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * h / 2
        sz = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * l / 2
        local = np.stack([sx, sy, sz], axis=1)
        return local @ yaw_matrix(self.yaw).T + self.centre

    def footprint(self) -> np.ndarray:
        """BEV rectangle in the (x, z) plane, counter-clockwise, shape (4, 2)."""
        l, w, _ = self.dims
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[w / 2, l / 2], [-w / 2, l / 2], [-w / 2, -l / 2], [w / 2, -l / 2]])
        x = local[:, 0] * c + local[:, 1] * s + self.centre[0]
        z = -local[:, 0] * s + local[:, 1] * c + self.centre[2]
        poly = np.stack([x, z], axis=1)
        # orientation depends on the handedness of the (x, z) plane; force CCW
        area2 = np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
        return poly if area2 > 0 else poly[::-1].copy()


@dataclass(frozen=True)
class TemplateMesh:
    """Triangulated template surface with its tight box and keypoints."""

    vertices: np.ndarray
    triangles: np.ndarray
    keypoint_front: np.ndarray = None

    def __post_init__(self):
        v = _frozen(self.vertices).reshape(-1, 3)
        f = _frozen(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(f) == 0:
            raise ValueError("template mesh has no triangles")
        if f.min() < 0 or f.max() >= len(v):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        front = self.keypoint_front
        if front is None:
            front = [0.0, 0.0, float(v[:, 2].max())]
        object.__setattr__(self, "keypoint_front", _frozen(front).reshape(3))
        packed = np.ascontiguousarray(v[f])
        object.__setattr__(self, "_packed", packed)
        object.__setattr__(self, "_planes", _kernels.triangle_planes(packed))

    @property
    def keypoint_centre(self) -> np.ndarray:
        return np.zeros(3)

    @property
    def box_min(self) -> np.ndarray:
        return self.vertices.min(axis=0)

    @property
    def box_max(self) -> np.ndarray:
        return self.vertices.max(axis=0)

    @property
    def box_centre(self) -> np.ndarray:
        return 0.5 * (self.box_min + self.box_max)

    @property
    def extents(self) -> np.ndarray:
        """Tight box extents along (x, y, z)."""
        return self.box_max - self.box_min

    @property
    def dims(self) -> np.ndarray:
        """(length, width, height) = extents along (z, x, y)."""
        e = self.extents
        return np.array([e[2], e[0], e[1]])

    @property
    def packed(self) -> np.ndarray:
        return self._packed

    @property
    def planes(self):
        return self._planes

    def triangle_areas(self) -> np.ndarray:
        t = self._packed
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def surface_area(self) -> float:
        return float(self.triangle_areas().sum())

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Area-uniform surface samples, shape (n, 3)."""
        areas = self.triangle_areas()
        tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        t = self._packed[tri]
        return (t[:, 0] * (1 - r1)[:, None] + t[:, 1] * (r1 * (1 - r2))[:, None]
                + t[:, 2] * (r1 * r2)[:, None])


def closest_points_on_mesh(points, mesh: TemplateMesh):
    """Vectorised exact nearest-surface query in the template frame.

    Returns squared distances (n,), closest points (n, 3) and the index of
    the achieving triangle (n,).
    """
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return _kernels.closest_points(pts, mesh.packed, *mesh.planes)


def point_to_mesh_sq_distance(point, mesh: TemplateMesh):
    """Exact squared distance from ``point`` to the mesh surface.

    Returns:
      (squared distance, closest point on the surface).
    """
    if mesh is None or len(mesh.triangles) == 0:
        raise ValueError("mesh is empty")
    sqd, closest, _ = closest_points_on_mesh(np.asarray(point, dtype=np.float64).reshape(1, 3), mesh)
    return float(sqd[0]), closest[0]


def posed_box(pose: Pose4DoF, mesh: TemplateMesh, score: float = 1.0) -> OrientedBox3D:
    centre = apply_pose(pose, mesh.box_centre[None])[0]
    return OrientedBox3D(centre, mesh.dims, pose.yaw, score)


def _quad(a, b, c, d):
    return [(a, b, c), (a, c, d)]


def car_template_parts(length_m: float, width_m: float, height_m: float):
    """Dimensions of the two boxes making up the built-in car.

    Returns (body_height, cabin_length, cabin_width, cabin_z_range).
    """
    body_h = 0.55 * height_m
    # a long cabin almost flush with the tail makes front and back easy to
    # tell apart from a partial scan
    cabin_l = 0.53 * length_m
    cabin_w = 0.85 * width_m
    z0 = -0.48 * length_m
    return body_h, cabin_l, cabin_w, (z0, z0 + cabin_l)


def builtin_car_template(length_m: float = 4.0, width_m: float = 1.6,
                         height_m: float = 1.5) -> TemplateMesh:
    """Low-poly two-box car: a body slab with a narrower, hatchback-style
    cabin reaching almost to the tail. The shell is watertight (the body roof is a ring around the
    cabin footprint)."""
    if min(length_m, width_m, height_m) <= 0:
        raise ValueError("template dimensions must be positive")
    L, W, H = float(length_m), float(width_m), float(height_m)
    body_h, _, cabin_w, (cz0, cz1) = car_template_parts(L, W, H)
    y_bot, y_mid, y_top = H / 2, H / 2 - body_h, -H / 2
    x0, x1 = -W / 2, W / 2
    z0, z1 = -L / 2, L / 2
    cx0, cx1 = -cabin_w / 2, cabin_w / 2
    v = [
        # body bottom 0-3
        (x0, y_bot, z0), (x1, y_bot, z0), (x1, y_bot, z1), (x0, y_bot, z1),
        # body top outer 4-7
        (x0, y_mid, z0), (x1, y_mid, z0), (x1, y_mid, z1), (x0, y_mid, z1),
        # cabin base (hole in the body roof) 8-11
        (cx0, y_mid, cz0), (cx1, y_mid, cz0), (cx1, y_mid, cz1), (cx0, y_mid, cz1),
        # cabin roof 12-15
        (cx0, y_top, cz0), (cx1, y_top, cz0), (cx1, y_top, cz1), (cx0, y_top, cz1),
    ]
    f = []
    f += _quad(0, 3, 2, 1)  # bottom
    f += _quad(0, 1, 5, 4)  # rear
    f += _quad(2, 3, 7, 6)  # front
    f += _quad(1, 2, 6, 5)  # right
    f += _quad(3, 0, 4, 7)  # left
    for k in range(4):  # roof ring
        f += _quad(4 + k, 4 + (k + 1) % 4, 8 + (k + 1) % 4, 8 + k)
    f += _quad(8, 9, 13, 12)
    f += _quad(10, 11, 15, 14)
    f += _quad(9, 10, 14, 13)
    f += _quad(11, 8, 12, 15)
    f += _quad(12, 13, 14, 15)
    return TemplateMesh(np.array(v), np.array(f), keypoint_front=[0.0, 0.0, L / 2])


def load_obj(path) -> TemplateMesh:
    """Read a Wavefront OBJ (``v``/``f`` records, 1-based, fan-triangulated).

    The mesh is shifted so that its tight box is centred on the origin.
    """
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                    if len(idx) < 3 or min(idx) < 0:
                        raise ValueError("bad face")
                    for k in range(1, len(idx) - 1):
                        faces.append((idx[0], idx[k], idx[k + 1]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed OBJ record: {line.strip()!r}") from exc
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    if len(faces) == 0:
        raise ValueError(f"{path}: no faces")
    v = v - 0.5 * (v.min(axis=0) + v.max(axis=0))
    return TemplateMesh(v, np.array(faces), keypoint_front=[0.0, 0.0, v[:, 2].max()])


def save_obj(path, mesh: TemplateMesh) -> None:
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def project_points(calib: CameraCalibration, points):
    """Pixel coordinates (n, 2) and homogeneous depth (n,) for camera-frame points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    h = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ calib.projection.T
    depth = h[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[:, :2] / depth[:, None]
    return uv, depth


def project(calib: CameraCalibration, point):
    """Pixel (u, v) of a camera-frame point, or None when it falls outside
    the image. Raises BehindCameraError for non-positive depth."""
    uv, depth = project_points(calib, point)
    if not depth[0] > 0:
        raise BehindCameraError(f"point {np.asarray(point).tolist()} has depth {depth[0]:.6g}")
    u, v = uv[0]
    if not (0 <= u < calib.image_width and 0 <= v < calib.image_height):
        return None
    return np.array([u, v])


def mask_membership(calib: CameraCalibration, points, mask: Mask2D) -> np.ndarray:
    """Boolean per point: positive depth, floored pixel in frame, mask bit set."""
    if (mask.width, mask.height) != (calib.image_width, calib.image_height):
        raise ValueError(
            f"mask is {mask.width}x{mask.height} but the calibration frame is "
            f"{calib.image_width}x{calib.image_height}")
    uv, depth = project_points(calib, points)
    keep = depth > 0
    with np.errstate(invalid="ignore"):
        u = np.floor(np.where(keep, uv[:, 0], -1.0))
        v = np.floor(np.where(keep, uv[:, 1], -1.0))
    keep &= (u >= 0) & (u < calib.image_width) & (v >= 0) & (v < calib.image_height)
    out = np.zeros(len(keep), dtype=bool)
    out[keep] = mask.bitmap[v[keep].astype(np.int64), u[keep].astype(np.int64)]
    return out


def filter_points_by_mask(calib: CameraCalibration, cloud: PointCloud, mask: Mask2D) -> PointCloud:
    if cloud.frame != "camera":
        raise ValueError("mask filtering needs a camera-frame cloud")
    return PointCloud(cloud.points[mask_membership(calib, cloud.points, mask)], "camera")
