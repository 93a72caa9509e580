"""Glue between datasets, the tracker, the network and evaluation.

Only :func:`ground_truth_detections` and :func:`evaluate_dataset` read
ground-truth fields; the training path goes through :func:`training_view`,
which copies points and frame ids and nothing else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .eval import Detection3D, evaluate, synthetic_difficulty
from .geometry import Pose4DoF, TemplateMesh, posed_box
from .losses import YawBins, yaw_sweep_losses
from .model import ModelParams, TrainingSet, decode_pose, predict_batch
from .tracking import Detection, TrackerConfig, build_tracks


@dataclass(frozen=True)
class Observation:
    """The label-free part of an instance."""

    points: np.ndarray
    frame_id: int
    score: float = 1.0


def training_view(instances) -> list:
    return [Observation(np.asarray(i.points.points if hasattr(i.points, "points") else i.points),
                        int(i.frame_id)) for i in instances]


def tracks_for(observations, ego, cfg: TrackerConfig = TrackerConfig()) -> list:
    """Tracker-built tracks as lists of observation indices."""
    by_frame = {}
    for k, o in enumerate(observations):
        by_frame.setdefault(o.frame_id, []).append(Detection(o.frame_id, k, o.points))
    frames = [by_frame[f] for f in sorted(by_frame)]
    return [t.instance_ids for t in build_tracks(frames, ego, cfg) if len(t) > 1]


def make_training_set(observations, ego, tracker: TrackerConfig = TrackerConfig()) -> TrainingSet:
    obs = list(observations)
    return TrainingSet([o.points for o in obs], [o.frame_id for o in obs],
                       tracks_for(obs, ego, tracker), ego)


def predict_poses(params: ModelParams, point_sets, batch_size: int = 64) -> list:
    bins = params.config.bins
    out = []
    for s in range(0, len(point_sets), batch_size):
        for p in predict_batch(params, point_sets[s:s + batch_size]):
            out.append(decode_pose(p, bins))
    return out


def boxes_for(poses, mesh: TemplateMesh, scores=None) -> list:
    scores = [1.0] * len(poses) if scores is None else scores
    return [posed_box(p, mesh, float(s)) for p, s in zip(poses, scores)]


def ground_truth_detections(instances) -> tuple:
    gts = [Detection3D(int(inst.frame_id), inst.gt_box, k) for k, inst in enumerate(instances)]
    difficulty = [synthetic_difficulty(inst.n_inliers) for inst in instances]
    return gts, difficulty


def evaluate_dataset(instances, pred_boxes):
    gts, diff = ground_truth_detections(instances)
    preds = [Detection3D(int(inst.frame_id), b, k) for k, (inst, b) in enumerate(zip(instances, pred_boxes))]
    return evaluate(preds, gts, diff)


def fit_direct(points, mesh: TemplateMesh, bins: YawBins = YawBins(), max_iter: int = 20,
               inner_steps: int = 5, tol: float = 1e-8):
    """Per-instance pose by alternating yaw bin search and translation descent.

    No learning and no variance. The yaw is the best bin at the current
    translation; the translation then takes ``inner_steps`` gradient steps on
    the mean squared residual with closest points held fixed (step size 1/2,
    which lands on the fixed-correspondence optimum).

    Returns:
      (Pose4DoF, iterations used).
    """
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise ValueError("fit_direct needs at least one point")
    t = np.median(pts, axis=0)
    offsets = np.array([0, n], dtype=np.int64)
    zeros = np.zeros(n)
    yaw, prev, it = 0.0, math.inf, 0
    for it in range(1, max_iter + 1):
        sweep = yaw_sweep_losses(pts, offsets, t[None], mesh, bins, zeros)[0]
        yaw = bins.centre(int(np.argmin(sweep)))
        R = Pose4DoF(yaw, t).rotation
        for _ in range(inner_steps):
            sqd, c = _kernels.canonical_closest(pts, offsets, t[None], np.array([yaw]),
                                                mesh.packed, *mesh.planes)
            t = t + 0.5 * 2.0 * (pts - (c @ R.T + t)).mean(axis=0)
        loss = float(sqd.mean())
        if prev - loss < tol:
            break
        prev = loss
    return Pose4DoF(yaw, t), it
