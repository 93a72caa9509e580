"""Readers and writers for KITTI object files and the mask input format.

Internal boxes are geometric centres with the template length along the
local z axis. KITTI labels use the bottom centre and put the length along
local x, so ``rotation_y = yaw - pi/2``. The conversion lives only here.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraCalibration, Mask2D, OrientedBox3D, PointCloud, wrap_pi


class FormatError(ValueError):
    """Malformed input file; the message names the file and the location."""


# -- velodyne ---------------------------------------------------------------


def read_velodyne(path) -> PointCloud:
    """Little-endian float32 (x, y, z, reflectance) records; reflectance is dropped."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        bad = len(raw) - len(raw) % 16
        raise FormatError(f"{path}: truncated record at byte offset {bad} "
                          f"(file size {len(raw)} is not a multiple of 16)")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(rec[:, :3].astype(np.float64), frame="sensor")


def read_velodyne_raw(path) -> np.ndarray:
    """The (n, 4) float32 records as stored."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: truncated record at byte offset {len(raw) - len(raw) % 16}")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4).copy()


def write_velodyne(path, points, reflectance=None) -> None:
    pts = np.asarray(getattr(points, "points", points)).reshape(-1, 3)
    rec = np.zeros((len(pts), 4), dtype="<f4")
    rec[:, :3] = pts
    if reflectance is not None:
        rec[:, 3] = reflectance
    Path(path).write_bytes(rec.tobytes())


# -- calibration ------------------------------------------------------------


def _orthonormal(r, tol=1e-6) -> bool:
    return np.allclose(r @ r.T, np.eye(3), atol=tol)


@dataclass(frozen=True)
class FrameCalib:
    P2: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray

    def __post_init__(self):
        for name, shape in (("P2", (3, 4)), ("R0_rect", (3, 3)), ("Tr_velo_to_cam", (3, 4))):
            a = np.array(getattr(self, name), dtype=np.float64).reshape(shape)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if not _orthonormal(self.R0_rect):
            raise ValueError("R0_rect is not orthonormal")
        if not _orthonormal(self.Tr_velo_to_cam[:, :3]):
            raise ValueError("rotation block of Tr_velo_to_cam is not orthonormal")

    def velo_to_cam_matrix(self) -> np.ndarray:
        """4x4 rectified-camera-from-velodyne transform."""
        tr = np.eye(4)
        tr[:3, :4] = self.Tr_velo_to_cam
        r0 = np.eye(4)
        r0[:3, :3] = self.R0_rect
        return r0 @ tr

    def camera(self, image_width: int = 1242, image_height: int = 375) -> CameraCalibration:
        return CameraCalibration(self.P2, image_width, image_height)


_CALIB_SIZES = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}


def read_calib(path) -> FrameCalib:
    entries = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            key, sep, rest = line.partition(":")
            if not sep:
                raise FormatError(f"{path}:{lineno}: expected 'KEY: values'")
            try:
                entries[key.strip()] = (lineno, np.array([float(v) for v in rest.split()]))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    mats = {}
    for key, size in _CALIB_SIZES.items():
        if key not in entries:
            raise FormatError(f"{path}: missing key {key}")
        lineno, vals = entries[key]
        if vals.size != size:
            raise FormatError(f"{path}:{lineno}: {key} needs {size} numbers, found {vals.size}")
        mats[key] = vals
    try:
        return FrameCalib(mats["P2"], mats["R0_rect"], mats["Tr_velo_to_cam"])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_calib(path, calib: FrameCalib) -> None:
    fmt = lambda a: " ".join(repr(float(v)) for v in np.asarray(a).reshape(-1))  # noqa: E731
    with open(path, "w") as fh:
        for name in ("P0", "P1", "P2", "P3"):
            fh.write(f"{name}: {fmt(calib.P2)}\n")
        fh.write(f"R0_rect: {fmt(calib.R0_rect)}\n")
        fh.write(f"Tr_velo_to_cam: {fmt(calib.Tr_velo_to_cam)}\n")
        fh.write(f"Tr_imu_to_velo: {fmt(np.eye(3, 4))}\n")


def velo_to_cam(calib: FrameCalib, cloud: PointCloud) -> PointCloud:
    """X_cam = R0_rect (Tr_velo_to_cam [X; 1])."""
    if cloud.frame != "sensor":
        raise ValueError("expected a sensor-frame cloud")
    pts = cloud.points @ calib.Tr_velo_to_cam[:, :3].T + calib.Tr_velo_to_cam[:, 3]
    return PointCloud(pts @ calib.R0_rect.T, frame="camera")


def cam_to_velo(calib: FrameCalib, cloud: PointCloud) -> PointCloud:
    if cloud.frame != "camera":
        raise ValueError("expected a camera-frame cloud")
    R = calib.Tr_velo_to_cam[:, :3]
    t = calib.Tr_velo_to_cam[:, 3]
    unrect = cloud.points @ calib.R0_rect  # R0^-1 = R0^T
    return PointCloud((unrect - t) @ R, frame="sensor")


# -- masks ------------------------------------------------------------------

MASK_IMAGE = "instances.png"
MASK_SIDECAR = "instances.json"


def write_masks(frame_dir, instance_map, metadata) -> None:
    """16-bit instance map (0 = background) plus the JSON list of instances."""
    d = Path(frame_dir)
    d.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(instance_map)
    if arr.ndim != 2 or arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
        raise ValueError("instance map must be 2-D with ids in [0, 65535]")
    Image.fromarray(arr.astype(np.uint16)).save(d / MASK_IMAGE)
    (d / MASK_SIDECAR).write_text(json.dumps(list(metadata), indent=2))


def read_masks(frame_dir) -> list:
    """One ``(Mask2D, metadata)`` per sidecar entry whose id occurs in the map."""
    d = Path(frame_dir)
    try:
        meta = json.loads((d / MASK_SIDECAR).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d / MASK_SIDECAR}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(meta, list):
        raise FormatError(f"{d / MASK_SIDECAR}: expected a JSON list of instances")
    if not meta:
        return []
    with Image.open(d / MASK_IMAGE) as im:
        ids = np.array(im).astype(np.int64)
    if ids.ndim != 2:
        raise FormatError(f"{d / MASK_IMAGE}: expected a single-channel image")
    present = set(np.unique(ids).tolist())
    out = []
    for k, m in enumerate(meta):
        try:
            iid, score = int(m["instance_id"]), float(m["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{d / MASK_SIDECAR}: entry {k}: {exc!r}") from exc
        if iid <= 0 or iid not in present:
            warnings.warn(f"{d}: instance {iid} not present in {MASK_IMAGE}; skipped", stacklevel=2)
            continue
        out.append((Mask2D(ids == iid, score), dict(m)))
    return out


# -- labels -----------------------------------------------------------------


@dataclass(frozen=True)
class KittiLabel:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple
    dimensions: tuple  # h, w, l
    location: tuple  # bottom centre, camera frame
    rotation_y: float
    score: float | None = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if x2 < x1 or y2 < y1:
            raise ValueError("bbox corners out of order")
        if not -math.pi - 1e-2 <= self.rotation_y <= math.pi + 1e-2:
            raise ValueError("rotation_y outside [-pi, pi]")

    def to_box(self) -> OrientedBox3D:
        h, w, l = self.dimensions
        x, y, z = self.location
        return OrientedBox3D([x, y - h / 2, z], [l, w, h], self.rotation_y + math.pi / 2,
                             1.0 if self.score is None else self.score)

    def format(self) -> str:
        f = lambda v: f"{v:.2f}"  # noqa: E731
        parts = [self.type, f(self.truncated), str(int(self.occluded)), f(self.alpha),
                 *map(f, self.bbox), *map(f, self.dimensions), *map(f, self.location), f(self.rotation_y)]
        if self.score is not None:
            parts.append(f(self.score))
        return " ".join(parts)


def image_bbox(box: OrientedBox3D, calib: CameraCalibration) -> tuple:
    """Projected corner extent clipped to the image; zeros when fully behind the camera."""
    c = box.corners()
    c = c[c[:, 2] > 1e-3]
    if len(c) == 0:
        return (0.0, 0.0, 0.0, 0.0)
    uvw = np.hstack([c, np.ones((len(c), 1))]) @ calib.projection.T
    uv = uvw[:, :2] / uvw[:, 2:3]
    x1, y1 = uv.min(axis=0)
    x2, y2 = uv.max(axis=0)
    W, H = calib.image_width - 1, calib.image_height - 1
    x1, x2 = np.clip([x1, x2], 0, W)
    y1, y2 = np.clip([y1, y2], 0, H)
    return (float(x1), float(y1), float(x2), float(y2))


def box_to_label(box: OrientedBox3D, calib: CameraCalibration | None = None, kind: str = "Car",
                 truncated: float = 0.0, occluded: int = 0, with_score: bool = True) -> KittiLabel:
    ry = wrap_pi(box.yaw - math.pi / 2)
    x, y, z = box.centre
    loc = (float(x), float(y + box.height / 2), float(z))
    alpha = wrap_pi(ry - math.atan2(x, z))
    bbox = image_bbox(box, calib) if calib is not None else (0.0, 0.0, 0.0, 0.0)
    return KittiLabel(kind, truncated, occluded, float(alpha), bbox,
                      (box.height, box.width, box.length), loc, float(ry),
                      float(box.score) if with_score else None)


def write_labels(path, boxes, calib: CameraCalibration | None = None, kind: str = "Car") -> None:
    lines = []
    for b in boxes:
        if not (np.all(np.isfinite(b.centre)) and np.all(np.isfinite(b.dims)) and math.isfinite(b.yaw)):
            raise ValueError("cannot write a non-finite box")
        lines.append(box_to_label(b, calib, kind).format())
    with open(path, "w") as fh:
        fh.write("".join(line + "\n" for line in lines))


def parse_label_line(line: str) -> KittiLabel:
    parts = line.split()
    if len(parts) not in (15, 16):
        raise ValueError(f"expected 15 or 16 fields, found {len(parts)}")
    v = [float(p) for p in parts[1:]]
    occ = int(parts[2])
    return KittiLabel(parts[0], v[0], occ, v[2], tuple(v[3:7]), tuple(v[7:10]), tuple(v[10:13]), v[13],
                      v[14] if len(v) == 15 else None)


def read_labels(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse_label_line(line))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return out


# -- ego motion ---------------------------------------------------------------


def write_ego(path, poses) -> None:
    """One 3x4 row-major transform per line, 12 whitespace-separated numbers."""
    with open(path, "w") as fh:
        for P in poses:
            vals = np.asarray(P, dtype=np.float64)[:3, :4].reshape(-1)
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


def read_ego(path) -> list:
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 12:
                raise FormatError(f"{path}:{lineno}: expected 12 numbers, found {len(parts)}")
            try:
                poses.append(np.array([float(p) for p in parts]).reshape(3, 4))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return poses
