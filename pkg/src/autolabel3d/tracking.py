"""Adjacent-frame association of detections by ego-compensated pseudo-centres."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud
from .losses import EgoMotion


@dataclass(frozen=True)
class TrackerConfig:
    max_distance_m: float = 2.0
    count_ratio_max: float = 2.0
    horizon: int = 5

    def __post_init__(self):
        if self.max_distance_m <= 0 or self.count_ratio_max <= 0 or self.horizon <= 0:
            raise ValueError("tracker settings must be positive")


@dataclass
class Detection:
    frame_id: int
    instance_id: int
    points: np.ndarray
    centre: np.ndarray = field(init=False)

    def __post_init__(self):
        pts = self.points.points if isinstance(self.points, PointCloud) else self.points
        self.points = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        self.centre = pseudo_centre(self.points)

    @property
    def n_points(self) -> int:
        return len(self.points)


@dataclass
class Track:
    track_id: int
    members: list  # (frame_id, instance_id), frames consecutive

    def __post_init__(self):
        frames = [f for f, _ in self.members]
        if any(b != a + 1 for a, b in zip(frames, frames[1:])):
            raise ValueError(f"track {self.track_id}: frame ids must be consecutive")

    def __len__(self):
        return len(self.members)

    @property
    def instance_ids(self) -> list:
        return [i for _, i in self.members]


def pseudo_centre(points) -> np.ndarray:
    """Per-axis median of a non-empty cloud."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("pseudo-centre of an empty cloud")
    return np.median(pts, axis=0)


def _passes(a: Detection, b: Detection, dist: float, cfg: TrackerConfig) -> bool:
    lo, hi = sorted((a.n_points, b.n_points))
    return dist < cfg.max_distance_m and lo > 0 and hi / lo <= cfg.count_ratio_max


def associate(dets_i, dets_j, ego: EgoMotion, cfg: TrackerConfig = TrackerConfig()) -> list:
    """Greedy mutual-nearest matching between frame i and frame i+1.

    ``ego`` maps frame-j coordinates into frame i. The closest remaining
    pair is decided first; it becomes a match only if it passes the
    distance and point-count gates, and either way both detections leave
    the pool.

    Returns:
      list of (index into dets_i, index into dets_j, distance).
    """
    if not dets_i or not dets_j:
        return []
    ci = np.array([d.centre for d in dets_i])
    cj = ego.apply(np.array([d.centre for d in dets_j]))
    dist = np.linalg.norm(ci[:, None, :] - cj[None, :, :], axis=2)
    order = np.lexsort((np.repeat(np.arange(len(dets_i))[:, None], len(dets_j), 1).ravel(),
                        dist.ravel()))
    used_i, used_j, out = set(), set(), []
    for flat in order:
        a, b = divmod(int(flat), len(dets_j))
        if a in used_i or b in used_j:
            continue
        used_i.add(a)
        used_j.add(b)
        if _passes(dets_i[a], dets_j[b], dist[a, b], cfg):
            out.append((a, b, float(dist[a, b])))
    return sorted(out)


def build_tracks(frames, ego, cfg: TrackerConfig = TrackerConfig()) -> list:
    """Chain adjacent-frame matches into tracks of at most ``horizon + 1`` frames.

    Args:
      frames: list of detection lists, one per frame in ascending frame order.
        Frames need not be contiguous; gaps end every track.
      ego: an object with ``between(i, j)`` giving g_{i<-j}; a ``KeyError``
        (e.g. frames from different sequences) means no association.

    Returns:
      Disjoint tracks covering every detection (singletons included).
    """
    max_len = cfg.horizon + 1
    tracks, open_tracks = [], {}
    prev, prev_frame = [], None
    for dets in frames:
        if not dets:
            open_tracks, prev, prev_frame = {}, [], None
            continue
        frame = dets[0].frame_id
        if any(d.frame_id != frame for d in dets):
            raise ValueError("detections of one frame must share a frame id")
        matches = []
        if prev and prev_frame is not None and frame == prev_frame + 1:
            try:
                g = ego.between(prev_frame, frame)
            except KeyError:
                g = None
            if g is not None:
                matches = associate(prev, dets, g, cfg)
        new_open = {}
        matched = {b: a for a, b, _ in matches}
        for b, det in enumerate(dets):
            tr = open_tracks.get(matched[b]) if b in matched else None
            if tr is None or len(tr.members) >= max_len:
                tr = Track(len(tracks), [])
                tracks.append(tr)
            tr.members.append((det.frame_id, det.instance_id))
            new_open[b] = tr
        open_tracks, prev, prev_frame = new_open, dets, frame
    return tracks


def write_tracks(path, tracks) -> None:
    with open(path, "w") as fh:
        for t in tracks:
            fh.write(json.dumps({"track_id": t.track_id,
                                 "members": [[int(f), int(i)] for f, i in t.members]}) + "\n")


def read_tracks(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(Track(int(rec["track_id"]), [(int(f), int(i)) for f, i in rec["members"]]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out
