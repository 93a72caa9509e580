"""Synthetic LiDAR scenes with known poses.

A static car template is placed in the world and observed from a sensor at
the camera origin that drives forward over a short sequence. Surface samples
are kept only when the segment from the sensor to the sample crosses no
other triangle, then perturbed with Gaussian noise; outliers are appended
from three sources (ground plane, a neighbouring box, points seen "through"
the car).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import _kernels
from .geometry import (OrientedBox3D, PointCloud, Pose4DoF, TemplateMesh, apply_pose,
                       builtin_car_template, posed_box, yaw_matrix)
from .kitti_io import FrameCalib, read_ego, write_calib, write_ego
from .losses import EgoChain

OUTLIER_MODES = ("ground", "neighbour", "pass_through")

# KITTI-like left colour camera, used to fill label 2D boxes
DEFAULT_P2 = np.array([[721.5377, 0.0, 609.5593, 44.85728],
                       [0.0, 721.5377, 172.854, 0.2163791],
                       [0.0, 0.0, 1.0, 0.002745884]])
DEFAULT_IMAGE_SIZE = (1242, 375)


class ResampleNeeded(RuntimeError):
    """Too few visible points; the caller should draw a new pose."""


@dataclass
class SynthConfig:
    n_instances: int = 2000
    x_range: tuple = (-10.0, 10.0)
    z_range: tuple = (8.0, 30.0)
    camera_height: float = 1.65
    points_range: tuple = (40, 300)
    noise_sigma: float = 0.02
    outlier_fraction: float = 0.15
    outlier_modes: tuple = OUTLIER_MODES
    sequence_length: int = 5
    ego_step_m: float = 1.0
    ego_yaw_deg: float = 2.0
    template_dims: tuple = (4.0, 1.6, 1.5)
    heldout_fraction: float = 0.1
    min_depth: float = 4.0
    seed: int = 0

    def __post_init__(self):
        self.x_range = tuple(float(v) for v in self.x_range)
        self.z_range = tuple(float(v) for v in self.z_range)
        self.points_range = tuple(int(v) for v in self.points_range)
        self.outlier_modes = tuple(self.outlier_modes)
        self.template_dims = tuple(float(v) for v in self.template_dims)
        if self.n_instances < 0:
            raise ValueError("n_instances must be >= 0")
        for name in ("outlier_fraction", "heldout_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("x_range", "z_range", "points_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be a non-degenerate (low, high) range")
        if self.points_range[0] < 5:
            raise ValueError("points_range must start at 5 or more")
        unknown = set(self.outlier_modes) - set(OUTLIER_MODES)
        if unknown:
            raise ValueError(f"unknown outlier modes {sorted(unknown)}")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def template(self) -> TemplateMesh:
        return builtin_car_template(*self.template_dims)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SynthInstance:
    points: PointCloud
    gt_pose: Pose4DoF
    gt_box: OrientedBox3D
    outlier_flags: np.ndarray
    frame_id: int = 0
    track_id: int = 0

    @property
    def n_inliers(self) -> int:
        return int((~self.outlier_flags).sum())


def _box_mesh(length, width, height) -> TemplateMesh:
    x, y, z = width / 2, height / 2, length / 2
    v = np.array([[sx * x, sy * y, sz * z] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    f = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1),
         (2, 3, 7), (2, 7, 6), (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]
    return TemplateMesh(v, np.array(f))


def visible_mask(targets, posed_triangles, origin=np.zeros(3), rel_eps=1e-6) -> np.ndarray:
    """True where the segment origin->target crosses no triangle before the target."""
    hits = _kernels.ray_hits(np.asarray(origin, dtype=np.float64),
                             np.ascontiguousarray(targets, dtype=np.float64),
                             np.ascontiguousarray(posed_triangles), rel_eps)
    return ~np.isfinite(hits)


def _posed_triangles(mesh: TemplateMesh, pose: Pose4DoF) -> np.ndarray:
    return np.ascontiguousarray(apply_pose(pose, mesh.packed.reshape(-1, 3)).reshape(-1, 3, 3))


def _visible_surface(rng, mesh, pose, n_target):
    tris = _posed_triangles(mesh, pose)
    kept = []
    have = 0
    for _ in range(6):
        cand = apply_pose(pose, mesh.sample_surface(rng, 3 * n_target + 64))
        vis = cand[visible_mask(cand, tris)]
        kept.append(vis)
        have += len(vis)
        if have >= n_target:
            break
    pts = np.concatenate(kept)[:n_target]
    return pts


def _exit_distance(pose: Pose4DoF, mesh: TemplateMesh, origin, direction) -> float:
    """Ray parameter where a ray leaves the posed tight box (slab test)."""
    R = pose.rotation
    o = R.T @ (origin - pose.translation) - mesh.box_centre
    d = R.T @ direction
    half = mesh.extents / 2
    t_far = np.inf
    for k in range(3):
        if abs(d[k]) > 1e-12:
            t_far = min(t_far, max((-half[k] - o[k]) / d[k], (half[k] - o[k]) / d[k]))
    return float(t_far)


def _outliers(rng, mesh: TemplateMesh, pose: Pose4DoF, surface, n_out, config: SynthConfig):
    if n_out == 0 or not config.outlier_modes:
        return np.zeros((0, 3))
    modes = rng.choice(len(config.outlier_modes), size=n_out)
    out = []
    L, W, H = mesh.dims
    ground_y = pose.translation[1] + H / 2
    for mode_idx in range(len(config.outlier_modes)):
        k = int(np.sum(modes == mode_idx))
        if k == 0:
            continue
        mode = config.outlier_modes[mode_idx]
        if mode == "ground":
            # ring around the footprint, at least 0.2 m outside it
            pts = []
            while len(pts) < k:
                u = rng.uniform(-W / 2 - 1.5, W / 2 + 1.5)
                v = rng.uniform(-L / 2 - 1.5, L / 2 + 1.5)
                if abs(u) < W / 2 + 0.2 and abs(v) < L / 2 + 0.2:
                    continue
                pts.append([u, 0.0, v])
            local = np.array(pts)
            world = local @ yaw_matrix(pose.yaw).T + pose.translation
            world[:, 1] = ground_y
            out.append(world)
        elif mode == "neighbour":
            gap = rng.uniform(0.3, 1.0)
            side = rng.choice([-1.0, 1.0])
            if rng.random() < 0.5:
                offset = np.array([side * (W + gap), 0.0, rng.uniform(-L / 2, L / 2)])
            else:
                offset = np.array([rng.uniform(-W / 2, W / 2), 0.0, side * (L + gap)])
            npose = Pose4DoF(pose.yaw, pose.translation + yaw_matrix(pose.yaw) @ offset)
            box = _box_mesh(L, W, H)
            tris = _posed_triangles(box, npose)
            pts = np.zeros((0, 3))
            for _ in range(10):
                cand = apply_pose(npose, box.sample_surface(rng, 4 * k + 16))
                pts = np.concatenate([pts, cand[visible_mask(cand, tris)]])
                if len(pts) >= k:
                    break
            if len(pts) < k:  # fully hidden neighbour: fall back to its surface
                pts = np.concatenate([pts, apply_pose(npose, box.sample_surface(rng, k))])
            out.append(pts[:k])
        else:  # pass_through
            src = surface[rng.integers(0, len(surface), size=k)]
            pts = []
            for p in src:
                d = p / np.linalg.norm(p)
                t_exit = _exit_distance(pose, mesh, np.zeros(3), d)
                pts.append(d * (t_exit + rng.uniform(0.3, 3.0)))
            out.append(np.array(pts))
    return np.concatenate(out)


def sample_instance(rng: np.random.Generator, template: TemplateMesh, config: SynthConfig,
                    pose: Pose4DoF | None = None, frame_id: int = 0, track_id: int = 0,
                    n_points: int | None = None) -> SynthInstance:
    """One observed object. Raises ResampleNeeded if fewer than 5 points are visible.

    ``n_points`` fixes the visible inlier budget; by default it is drawn
    uniformly from ``config.points_range``.
    """
    if pose is None:
        pose = random_pose(rng, template, config)
    if n_points is None:
        n_target = int(rng.integers(config.points_range[0], config.points_range[1] + 1))
    else:
        n_target = int(n_points)
    surface = _visible_surface(rng, template, pose, n_target)
    if len(surface) < 5:
        raise ResampleNeeded(f"only {len(surface)} visible points")
    inliers = surface + rng.normal(0.0, config.noise_sigma, size=surface.shape)
    n_out = math.ceil(config.outlier_fraction * len(surface))
    outliers = _outliers(rng, template, pose, surface, n_out, config)
    pts = np.concatenate([inliers, outliers])
    # stored as float32 on disk; keep memory and disk identical
    pts = pts.astype(np.float32).astype(np.float64)
    flags = np.zeros(len(pts), dtype=bool)
    flags[len(inliers):] = True
    return SynthInstance(PointCloud(pts, "camera"), pose, posed_box(pose, template), flags,
                         frame_id, track_id)


def random_pose(rng, template: TemplateMesh, config: SynthConfig) -> Pose4DoF:
    H = template.extents[1]
    x = rng.uniform(*config.x_range)
    z = rng.uniform(*config.z_range)
    return Pose4DoF(rng.uniform(0.0, 2 * math.pi), [x, config.camera_height - H / 2, z])


def _motion(yaw, step):
    m = np.eye(4)
    m[:3, :3] = yaw_matrix(yaw)
    m[:3, 3] = [0.0, 0.0, step]
    return m


def sample_sequence(rng: np.random.Generator, template: TemplateMesh, config: SynthConfig,
                    length: int | None = None, track_id: int = 0, first_frame: int = 0,
                    max_attempts: int = 50):
    """A static object seen from a moving sensor over ``length`` frames.

    Returns:
      (instances, sensor poses): per-frame camera-to-world 4x4 matrices with
      the first frame as world, so g_{i<-j} = P_i^-1 P_j.
    """
    length = config.sequence_length if length is None else length
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    for _ in range(max_attempts):
        world_pose = random_pose(rng, template, config)
        sensor = [np.eye(4)]
        for _ in range(length - 1):
            dyaw = math.radians(rng.uniform(-config.ego_yaw_deg, config.ego_yaw_deg))
            step = config.ego_step_m * rng.uniform(0.5, 1.5)
            sensor.append(sensor[-1] @ _motion(dyaw, step))
        G = world_pose.matrix()
        poses = []
        for P in sensor:
            m = np.linalg.inv(P) @ G
            poses.append(Pose4DoF(math.atan2(m[0, 2], m[0, 0]), m[:3, 3]))
        if any(p.translation[2] < config.min_depth for p in poses):
            continue
        # one density per object, falling off with squared depth
        lo, hi = config.points_range
        base = rng.uniform(lo, hi) * poses[0].translation[2] ** 2
        counts = [int(np.clip(round(base / p.translation[2] ** 2 * rng.uniform(0.9, 1.1)), lo, hi))
                  for p in poses]
        try:
            insts = [sample_instance(rng, template, config, pose=p, frame_id=first_frame + i,
                                     track_id=track_id, n_points=n)
                     for i, (p, n) in enumerate(zip(poses, counts))]
        except ResampleNeeded:
            continue
        return insts, sensor
    raise ResampleNeeded(f"no valid sequence after {max_attempts} attempts")


@dataclass
class SynthDataset:
    instances: list
    ego: EgoChain
    sequence_of_frame: list
    heldout_tracks: set = field(default_factory=set)
    config: SynthConfig | None = None

    def split_indices(self, split: str):
        want_heldout = split == "heldout"
        return [i for i, inst in enumerate(self.instances)
                if (inst.track_id in self.heldout_tracks) == want_heldout]

    @property
    def n_frames(self) -> int:
        return len(self.ego)


def make_dataset(config: SynthConfig, template: TemplateMesh | None = None) -> SynthDataset:
    """Deterministic dataset: sequence s draws from the stream (seed, s)."""
    template = config.template() if template is None else template
    K = config.sequence_length
    n_seq = math.ceil(config.n_instances / K) if config.n_instances else 0
    instances, sensor_poses, seq_of_frame = [], [], []
    for s in range(n_seq):
        length = min(K, config.n_instances - s * K)
        rng = np.random.default_rng([config.seed, s])
        insts, sensor = sample_sequence(rng, template, config, length=length, track_id=s,
                                        first_frame=len(sensor_poses))
        instances.extend(insts)
        sensor_poses.extend(P[:3, :4] for P in sensor)
        seq_of_frame.extend([s] * length)
    n_held = int(round(config.heldout_fraction * n_seq))
    order = np.random.default_rng([config.seed, 2 ** 31 - 1]).permutation(n_seq)
    heldout = set(int(t) for t in order[:n_held])
    return SynthDataset(instances, EgoChain(sensor_poses, seq_of_frame), seq_of_frame, heldout, config)


# -- on-disk format -------------------------------------------------------------


def save_dataset(ds: SynthDataset, directory) -> None:
    """``scenes.jsonl`` + ``points.bin`` (float32 xyz) + ``ego.txt`` + ``calib.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(d / "scenes.jsonl", "w") as js, open(d / "points.bin", "wb") as pb:
        for i, inst in enumerate(ds.instances):
            pts = inst.points.points.astype("<f4")
            pb.write(pts.tobytes())
            rec = {
                "instance_id": i,
                "frame_id": inst.frame_id,
                "sequence_id": ds.sequence_of_frame[inst.frame_id],
                "track_id": inst.track_id,
                "split": "heldout" if inst.track_id in ds.heldout_tracks else "train",
                "gt_pose": {"yaw": inst.gt_pose.yaw, "translation": inst.gt_pose.translation.tolist()},
                "gt_box": {"centre": inst.gt_box.centre.tolist(), "dims": inst.gt_box.dims.tolist(),
                           "yaw": inst.gt_box.yaw},
                "point_offset": offset,
                "n_points": len(pts),
                "n_inliers": inst.n_inliers,
            }
            js.write(json.dumps(rec, sort_keys=True) + "\n")
            offset += len(pts)
    write_ego(d / "ego.txt", ds.ego.poses)
    write_calib(d / "calib.txt", FrameCalib(DEFAULT_P2, np.eye(3), np.eye(3, 4)))
    if ds.config is not None:
        with open(d / "synth_config.json", "w") as fh:
            json.dump(ds.config.to_dict(), fh, indent=2, sort_keys=True)


def load_dataset(directory) -> SynthDataset:
    d = Path(directory)
    raw = np.fromfile(d / "points.bin", dtype="<f4")
    if raw.size % 3:
        raise ValueError(f"{d / 'points.bin'}: size is not a multiple of 12 bytes")
    allpts = raw.reshape(-1, 3).astype(np.float64)
    instances, heldout, seq_of_frame = [], set(), {}
    with open(d / "scenes.jsonl") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                o, n = r["point_offset"], r["n_points"]
                if o + n > len(allpts):
                    raise ValueError("point range beyond points.bin")
                flags = np.zeros(n, dtype=bool)
                flags[r["n_inliers"]:] = True
                pose = Pose4DoF(r["gt_pose"]["yaw"], r["gt_pose"]["translation"])
                box = OrientedBox3D(r["gt_box"]["centre"], r["gt_box"]["dims"], r["gt_box"]["yaw"])
                instances.append(SynthInstance(PointCloud(allpts[o:o + n], "camera"), pose, box, flags,
                                               r["frame_id"], r["track_id"]))
                seq_of_frame[r["frame_id"]] = r["sequence_id"]
                if r["split"] == "heldout":
                    heldout.add(r["track_id"])
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{d / 'scenes.jsonl'}:{lineno}: {exc}") from exc
    poses = read_ego(d / "ego.txt")
    seqs = [seq_of_frame.get(i, -1 - i) for i in range(len(poses))]
    cfg = None
    if (d / "synth_config.json").exists():
        cfg = SynthConfig.from_dict(json.loads((d / "synth_config.json").read_text()))
    return SynthDataset(instances, EgoChain(poses, seqs), seqs, heldout, cfg)
