"""Training objectives: template alignment, yaw-bin search, consistency.

Scalar helpers (``half_chamfer`` and friends) return floats and are what the
tests and the direct fitter use. :func:`total_loss` builds a differentiable
graph over a batch of predictions, with closest-point correspondences and
the best yaw bin held fixed during back-propagation.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import autodiff as ad
from .geometry import TWO_PI, Pose4DoF, TemplateMesh, closest_points_on_mesh, inverse_apply_pose


def _points_array(points) -> np.ndarray:
    pts = getattr(points, "points", points)
    return np.ascontiguousarray(np.asarray(pts, dtype=np.float64).reshape(-1, 3))


@dataclass(frozen=True)
class YawBins:
    n_bins: int = 64

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("need at least two yaw bins")

    @property
    def centres(self) -> np.ndarray:
        return TWO_PI * np.arange(self.n_bins) / self.n_bins

    def centre(self, k: int) -> float:
        return TWO_PI * int(k) / self.n_bins

    def nearest(self, yaw) -> np.ndarray:
        """Index of the bin centre closest to ``yaw`` (wrap-aware)."""
        return np.mod(np.rint(np.asarray(yaw) * self.n_bins / TWO_PI), self.n_bins).astype(np.int64)


@dataclass(frozen=True)
class EgoMotion:
    """Rigid transform g_{i<-j}: maps frame-j camera coordinates to frame i."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("ego rotation must be orthonormal with determinant +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrix(cls, m) -> "EgoMotion":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def identity(cls) -> "EgoMotion":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "EgoMotion") -> "EgoMotion":
        """g_{i<-j} . g_{j<-k} = g_{i<-k}."""
        return EgoMotion(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "EgoMotion":
        return EgoMotion(self.rotation.T, -self.rotation.T @ self.translation)

    def apply_pose(self, pose: Pose4DoF) -> Pose4DoF:
        """g . pose, valid when the rotation is a pure yaw."""
        yaw = math.atan2(self.rotation[0, 2], self.rotation[0, 0])
        return Pose4DoF(pose.yaw + yaw, self.apply(pose.translation[None])[0])


class EgoChain:
    """Per-frame sensor poses (camera-to-world, 3x4) within one or more sequences.

    ``between(i, j)`` returns g_{i<-j} = P_i^-1 P_j. Frames belonging to
    different sequences have no ego relation.
    """

    def __init__(self, poses, sequence_ids=None):
        self.poses = [np.asarray(p, dtype=np.float64).reshape(3, 4) for p in poses]
        self.sequence_ids = (list(sequence_ids) if sequence_ids is not None
                             else [0] * len(self.poses))
        if len(self.sequence_ids) != len(self.poses):
            raise ValueError("one sequence id per frame is required")

    def __len__(self):
        return len(self.poses)

    def pose(self, i: int) -> EgoMotion:
        return EgoMotion.from_matrix(self.poses[i])

    def between(self, i: int, j: int) -> EgoMotion:
        if not (0 <= i < len(self.poses) and 0 <= j < len(self.poses)):
            raise KeyError(f"no ego motion for frames ({i}, {j})")
        if self.sequence_ids[i] != self.sequence_ids[j]:
            raise KeyError(f"frames {i} and {j} belong to different sequences")
        return self.pose(i).inverse().compose(self.pose(j))


def _ego_between(ego, i, j) -> EgoMotion:
    try:
        if isinstance(ego, Mapping):
            return ego[(i, j)]
        return ego.between(i, j)
    except KeyError as exc:
        raise ValueError(f"missing ego motion g_({i}<-{j})") from exc


@dataclass
class LossBreakdown:
    alignment: float
    yaw_ce: float
    consistency_centre: float
    consistency_front: float
    total: float
    graph: ad.Tensor | None = field(default=None, repr=False, compare=False)
    best_bins: np.ndarray | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("alignment", "yaw_ce", "consistency_centre", "consistency_front", "total")}


@dataclass(frozen=True)
class LossWeights:
    alignment: float = 1.0
    yaw: float = 1.0
    consistency: float = 1.0


def residuals_sq(pose: Pose4DoF, mesh: TemplateMesh, points) -> np.ndarray:
    """Per-point squared distance to the posed template, via the inverse pose."""
    pts = _points_array(points)
    sqd, _, _ = closest_points_on_mesh(inverse_apply_pose(pose, pts), mesh)
    return sqd


def half_chamfer(pose: Pose4DoF, mesh: TemplateMesh, points) -> float:
    pts = _points_array(points)
    if len(pts) == 0:
        raise ValueError("half_chamfer needs at least one point")
    return float(residuals_sq(pose, mesh, pts).mean())


def half_chamfer_weighted(pose: Pose4DoF, mesh: TemplateMesh, points, log_var) -> float:
    """Outlier-aware alignment: mean of r^2 / sigma^2 + log sigma^2."""
    pts = _points_array(points)
    log_var = np.asarray(log_var, dtype=np.float64).reshape(-1)
    if len(pts) == 0:
        raise ValueError("half_chamfer_weighted needs at least one point")
    if len(log_var) != len(pts):
        raise ValueError(f"{len(log_var)} log-variances for {len(pts)} points")
    r2 = residuals_sq(pose, mesh, pts)
    return float(np.mean(r2 * np.exp(-log_var) + log_var))


def yaw_sweep_losses(points, offsets, translations, mesh: TemplateMesh, bins: YawBins,
                     log_var=None) -> np.ndarray:
    """Weighted half-Chamfer of every instance at every bin centre, (B, n_bins)."""
    pts = _points_array(points)
    s = np.zeros(len(pts)) if log_var is None else np.ascontiguousarray(log_var, dtype=np.float64)
    c = bins.centres
    return _kernels.yaw_sweep(pts, np.asarray(offsets, dtype=np.int64),
                              np.ascontiguousarray(translations, dtype=np.float64).reshape(-1, 3),
                              np.cos(c), np.sin(c), np.exp(-s), s, mesh.packed, *mesh.planes)


def yaw_bin_search(translation, mesh: TemplateMesh, points, log_var=None,
                   bins: YawBins = YawBins()):
    """Exhaustive search over bin centres at a fixed translation.

    Returns:
      (best bin index, its weighted half-Chamfer); ties go to the lowest index.
    """
    pts = _points_array(points)
    if len(pts) == 0:
        raise ValueError("yaw_bin_search needs at least one point")
    if log_var is not None and len(log_var) != len(pts):
        raise ValueError(f"{len(log_var)} log-variances for {len(pts)} points")
    losses = yaw_sweep_losses(pts, [0, len(pts)], translation, mesh, bins, log_var)[0]
    k = int(np.argmin(losses))
    return k, float(losses[k])


def yaw_cross_entropy(logits, target_bin: int) -> float:
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 0 <= target_bin < len(logits):
        raise ValueError(f"target bin {target_bin} outside [0, {len(logits)})")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    return float(-ad.log_softmax(logits)[target_bin])


def track_pairs(n_frames: int, horizon: int):
    """(a, b) position pairs with 1 <= b - a <= horizon inside one track."""
    return [(a, a + j) for a in range(n_frames) for j in range(1, horizon + 1) if a + j < n_frames]


def consistency_loss(track_poses, ego, keypoint, horizon: int = 5, frame_ids=None) -> float:
    """Ego-compensated keypoint disagreement along one track.

    Args:
      track_poses: predicted poses at consecutive frames.
      ego: a mapping ``{(i, j): EgoMotion}`` or an object with ``between(i, j)``.
      keypoint: template-frame point, e.g. the centre or front keypoint.
      horizon: largest frame offset compared.
      frame_ids: frame index of each pose; defaults to 0..n-1.

    Returns:
      Sum of squared disagreements divided by the number of pairs (0 when
      the track has a single frame).
    """
    frames = list(range(len(track_poses))) if frame_ids is None else list(frame_ids)
    kp = np.asarray(keypoint, dtype=np.float64).reshape(1, 3)
    pos = [p.rotation @ kp[0] + p.translation for p in track_poses]
    pairs = track_pairs(len(track_poses), horizon)
    if not pairs:
        return 0.0
    total = 0.0
    for a, b in pairs:
        g = _ego_between(ego, frames[a], frames[b])
        d = g.apply(pos[b][None])[0] - pos[a]
        total += float(d @ d)
    return total / len(pairs)


@dataclass
class BatchPrediction:
    """Stacked network outputs for B instances.

    ``translation`` (B, 3); exactly one of ``yaw_logits`` (B, n_bins) or
    ``yaw_angle`` (B,); ``log_var`` (N,) concatenated over instances.
    """

    translation: ad.Tensor
    log_var: ad.Tensor
    yaw_logits: ad.Tensor | None = None
    yaw_angle: ad.Tensor | None = None

    @classmethod
    def from_predictions(cls, preds) -> "BatchPrediction":
        preds = list(preds)
        t = ad.Tensor(np.stack([np.asarray(getattr(p.translation, "value", p.translation)) for p in preds]))
        lv = ad.Tensor(np.concatenate([np.asarray(getattr(p.log_var, "value", p.log_var)).reshape(-1)
                                       for p in preds]))
        logits = None
        if getattr(preds[0], "yaw_logits", None) is not None:
            logits = ad.Tensor(np.stack([np.asarray(getattr(p.yaw_logits, "value", p.yaw_logits))
                                         for p in preds]))
        angle = None
        if getattr(preds[0], "yaw_angle", None) is not None:
            angle = ad.Tensor(np.array([float(getattr(p.yaw_angle, "value", p.yaw_angle)) for p in preds]))
        return cls(t, lv, logits, angle)

    def decoded_yaw(self, bins: YawBins) -> np.ndarray:
        if self.yaw_logits is not None:
            return bins.centres[np.argmax(self.yaw_logits.value, axis=1)]
        return np.mod(self.yaw_angle.value, TWO_PI)


def _rotate_about_y(theta: ad.Tensor, pts) -> ad.Tensor:
    """R(theta_i) p_i row-wise; ``pts`` constant (n, 3), ``theta`` (n,)."""
    c = ad.reshape(ad.cos(theta), (-1, 1))
    s = ad.reshape(ad.sin(theta), (-1, 1))
    px, py, pz = pts[:, :1], pts[:, 1:2], pts[:, 2:3]
    x = c * px + s * pz
    z = c * pz - s * px
    return ad.concat([x, ad.Tensor(py), z], axis=1)


def _offsets(point_sets):
    counts = np.array([len(p) for p in point_sets], dtype=np.int64)
    if np.any(counts == 0):
        raise ValueError(f"instance {int(np.argmin(counts))} has no points")
    return np.concatenate([[0], np.cumsum(counts)]), counts


def total_loss(points, prediction, mesh: TemplateMesh, bins: YawBins = YawBins(), tracks=(),
               ego=None, frame_ids=None, horizon: int = 5, weights: LossWeights = LossWeights(),
               outlier_aware: bool = True) -> LossBreakdown:
    """Composite objective over a batch.

    Args:
      points: sequence of B per-instance (n_b, 3) clouds.
      prediction: a :class:`BatchPrediction` or a sequence of per-instance
        predictions (anything with translation / yaw_logits / log_var).
      tracks: sequences of instance indices at consecutive frames.
      ego: ego relation between frames (see :func:`consistency_loss`).
      frame_ids: frame index of each instance, needed when tracks are given.
      outlier_aware: when False the log-variances are ignored (plain
        half-Chamfer).

    Returns:
      LossBreakdown whose ``graph`` is the differentiable total.
    """
    pred = prediction if isinstance(prediction, BatchPrediction) else BatchPrediction.from_predictions(prediction)
    point_sets = [_points_array(p) for p in points]
    offsets, counts = _offsets(point_sets)
    X = np.concatenate(point_sets)
    T = pred.translation
    B = len(point_sets)
    if T.shape != (B, 3):
        raise ValueError(f"translation has shape {T.shape}, expected {(B, 3)}")
    if pred.log_var.shape != (len(X),):
        raise ValueError(f"log_var has shape {pred.log_var.shape}, expected {(len(X),)}")
    s_val = pred.log_var.value if outlier_aware else np.zeros(len(X))

    best_bins = None
    if pred.yaw_logits is not None:
        sweep = yaw_sweep_losses(X, offsets, T.value, mesh, bins, s_val)
        best_bins = np.argmin(sweep, axis=1)
        yaw_star = bins.centres[best_bins]
        _, closest = _kernels.canonical_closest(X, offsets, T.value, yaw_star, mesh.packed, *mesh.planes)
        yaw_rep = np.repeat(yaw_star, counts)
        cs, sn = np.cos(yaw_rep), np.sin(yaw_rep)
        surf = np.stack([closest[:, 0] * cs + closest[:, 2] * sn, closest[:, 1],
                         closest[:, 2] * cs - closest[:, 0] * sn], axis=1)
        resid = ad.Tensor(X - surf) - ad.repeat_rows(T, counts)
        ce = ad.mean(ad.softmax_cross_entropy(pred.yaw_logits, best_bins))
        theta = ad.Tensor(bins.centres[np.argmax(pred.yaw_logits.value, axis=1)])
    else:
        theta = pred.yaw_angle
        _, closest = _kernels.canonical_closest(X, offsets, T.value, np.asarray(theta.value, dtype=np.float64),
                                                mesh.packed, *mesh.planes)
        surf = _rotate_about_y(ad.repeat_rows(theta, counts), closest)
        resid = ad.Tensor(X) - surf - ad.repeat_rows(T, counts)
        ce = ad.Tensor(0.0)

    r2 = ad.sum(ad.square(resid), axis=1)
    if outlier_aware:
        per_point = r2 * ad.exp(-pred.log_var) + pred.log_var
    else:
        per_point = r2
    alignment = ad.mean(ad.segment_mean(per_point, offsets))

    cons = []
    for kp in (mesh.keypoint_centre, mesh.keypoint_front):
        cons.append(_batch_consistency(T, theta, kp, tracks, ego, frame_ids, horizon))

    total = (weights.alignment * alignment + weights.yaw * ce
             + weights.consistency * (cons[0] + cons[1]))
    return LossBreakdown(float(alignment.value), float(ce.value), float(cons[0].value),
                         float(cons[1].value), float(total.value), graph=total, best_bins=best_bins)


def _batch_consistency(T, theta, keypoint, tracks, ego, frame_ids, horizon):
    ia, ib, rots, trans = [], [], [], []
    for track in tracks:
        track = list(track)
        for a, b in track_pairs(len(track), horizon):
            g = _ego_between(ego, int(frame_ids[track[a]]), int(frame_ids[track[b]]))
            ia.append(track[a])
            ib.append(track[b])
            rots.append(g.rotation)
            trans.append(g.translation)
    if not ia:
        return ad.Tensor(0.0)
    B = T.shape[0]
    kp = np.broadcast_to(np.asarray(keypoint, dtype=np.float64), (B, 3))
    pos = _rotate_about_y(theta, kp) + T
    pb = ad.reshape(ad.take(pos, np.array(ib)), (-1, 1, 3))
    moved = ad.sum(pb * np.array(rots), axis=2) + np.array(trans)
    diff = moved - ad.take(pos, np.array(ia))
    return ad.sum(ad.square(diff)) * (1.0 / len(ia))
