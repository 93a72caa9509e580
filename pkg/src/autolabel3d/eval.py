"""Box overlap, average precision and yaw error."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import OrientedBox3D

AREA_EPS = 1e-12
DIFFICULTIES = ("easy", "moderate", "hard")
SYNTH_MIN_INLIERS = {"easy": 200, "moderate": 80, "hard": 20}
# KITTI: min 2D box height (px), max occlusion level, max truncation
KITTI_LIMITS = {"easy": (40, 0, 0.15), "moderate": (25, 1, 0.30), "hard": (25, 2, 0.50)}


def _polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _ccw(poly):
    return poly if _polygon_area(poly) >= 0 else poly[::-1]


def clip_convex(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman intersection of two convex polygons."""
    out = list(_ccw(np.asarray(subject, dtype=np.float64)))
    clip = _ccw(np.asarray(clip, dtype=np.float64))
    for k in range(len(clip)):
        if not out:
            break
        a, b = clip[k], clip[(k + 1) % len(clip)]
        ex, ey = b - a

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        for i in range(len(inp)):
            p, q = inp[i], inp[(i + 1) % len(inp)]
            sp, sq = side(p), side(q)
            if sp >= 0:
                out.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append(p + t * (q - p))
    return np.array(out).reshape(-1, 2)


def bev_intersection(a: OrientedBox3D, b: OrientedBox3D) -> float:
    area = _polygon_area(clip_convex(a.footprint(), b.footprint()))
    return area if area >= AREA_EPS else 0.0


def bev_iou(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Overlap of the two ground-plane footprints."""
    inter = bev_intersection(a, b)
    if inter == 0.0:
        return 0.0
    union = a.length * a.width + b.length * b.width - inter
    return min(1.0, inter / union)


def _vertical_overlap(a: OrientedBox3D, b: OrientedBox3D) -> float:
    lo = max(a.centre[1] - a.height / 2, b.centre[1] - b.height / 2)
    hi = min(a.centre[1] + a.height / 2, b.centre[1] + b.height / 2)
    return max(0.0, hi - lo)


def iou_3d(a: OrientedBox3D, b: OrientedBox3D) -> float:
    inter = bev_intersection(a, b) * _vertical_overlap(a, b)
    if inter <= 0.0:
        return 0.0
    va = a.length * a.width * a.height
    vb = b.length * b.width * b.height
    return min(1.0, inter / (va + vb - inter))


def yaw_error_deg(pred_yaw, gt_yaw):
    """Smallest absolute angular difference in degrees, in [0, 180]."""
    d = np.abs(np.mod(np.asarray(pred_yaw, dtype=np.float64) - gt_yaw, 2 * math.pi))
    d = np.minimum(d, 2 * math.pi - d)
    out = np.degrees(d)
    return float(out) if np.ndim(out) == 0 else out


# -- average precision ------------------------------------------------------


@dataclass(frozen=True)
class Detection3D:
    """A scored prediction or a ground-truth box, grouped by frame."""

    frame_id: int
    box: OrientedBox3D
    ident: int = -1  # negative: unassigned
    ignore: bool = False  # ground truth only: matched predictions neither count as TP nor FP


def match_detections(predictions, ground_truths, iou_fn=bev_iou, threshold=0.5):
    """Score-descending greedy matching within frames.

    Returns:
      (scores, is_tp, is_ignored, n_gt) with scores sorted descending.
    """
    ids = [p.ident for p in predictions if p.ident >= 0]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate prediction ids")
    gts_by_frame = {}
    for g in ground_truths:
        gts_by_frame.setdefault(g.frame_id, []).append(g)
    n_gt = sum(1 for g in ground_truths if not g.ignore)
    order = sorted(range(len(predictions)), key=lambda k: (-predictions[k].box.score, k))
    taken = {f: np.zeros(len(v), dtype=bool) for f, v in gts_by_frame.items()}
    scores, tp, ign = [], [], []
    for k in order:
        p = predictions[k]
        cands = gts_by_frame.get(p.frame_id, [])
        best, best_iou = -1, threshold
        for gi, g in enumerate(cands):
            if taken[p.frame_id][gi]:
                continue
            iou = iou_fn(p.box, g.box)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = gi, iou
        scores.append(p.box.score)
        if best >= 0:
            taken[p.frame_id][best] = True
            tp.append(not cands[best].ignore)
            ign.append(cands[best].ignore)
        else:
            tp.append(False)
            ign.append(False)
    return np.array(scores), np.array(tp, dtype=bool), np.array(ign, dtype=bool), n_gt


def pr_curve(is_tp, is_ignored, n_gt):
    keep = ~np.asarray(is_ignored, dtype=bool)
    tp = np.asarray(is_tp, dtype=bool)[keep]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt if n_gt else np.zeros(len(tp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return precision, recall


def interpolated_ap(precision, recall, n_points: int = 11) -> float:
    """KITTI-style interpolated AP: 11 points include recall 0, 40 points start at 1/40."""
    if len(precision) == 0:
        return 0.0
    grid = np.linspace(0.0, 1.0, 11) if n_points == 11 else np.linspace(1.0 / 40, 1.0, 40)
    total = 0.0
    for r in grid:
        p = precision[recall >= r - 1e-12]
        total += p.max() if p.size else 0.0
    return float(total / len(grid))


def average_precision(predictions, ground_truths, iou_fn=bev_iou, threshold=0.5, n_points=11) -> float:
    """AP of scored predictions against ground truths at an IoU threshold."""
    _, tp, ign, n_gt = match_detections(predictions, ground_truths, iou_fn, threshold)
    if n_gt == 0:
        return 0.0
    precision, recall = pr_curve(tp, ign, n_gt)
    return interpolated_ap(precision, recall, n_points)


# -- report -----------------------------------------------------------------


def synthetic_difficulty(n_inliers: int) -> int:
    """0 easy, 1 moderate, 2 hard, 3 below every bucket."""
    for k, name in enumerate(DIFFICULTIES):
        if n_inliers >= SYNTH_MIN_INLIERS[name]:
            return k
    return 3


def kitti_difficulty(bbox_height: float, occluded: int, truncated: float) -> int:
    for k, name in enumerate(DIFFICULTIES):
        h, occ, trunc = KITTI_LIMITS[name]
        if bbox_height >= h and occluded <= occ and truncated <= trunc:
            return k
    return 3


@dataclass
class EvalReport:
    ap_bev: dict = field(default_factory=dict)
    ap_3d: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    yaw_error_mean_deg: float = float("nan")
    yaw_error_median_deg: float = float("nan")
    centre_error_median_m: float = float("nan")
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ap_bev": self.ap_bev,
            "ap_3d": self.ap_3d,
            "curves": self.curves,
            "yaw_error_mean_deg": self.yaw_error_mean_deg,
            "yaw_error_median_deg": self.yaw_error_median_deg,
            "centre_error_median_m": self.centre_error_median_m,
            "counts": self.counts,
        }

    def to_json(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [("metric", "interp") + DIFFICULTIES]
        for label, ap in (("AP_BEV@0.5", self.ap_bev), ("AP_3D@0.5", self.ap_3d)):
            for interp in ("11", "40"):
                rows.append((label, interp) + tuple(f"{ap[d][interp]:.4f}" for d in DIFFICULTIES))
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        lines.append(f"yaw error mean {self.yaw_error_mean_deg:.2f} deg, "
                     f"median {self.yaw_error_median_deg:.2f} deg")
        lines.append(f"centre error median {self.centre_error_median_m:.3f} m")
        lines.append("counts " + " ".join(f"{k}={v}" for k, v in sorted(self.counts.items())))
        return "\n".join(lines)


def _finite(x):
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def nearest_pairs(predictions, ground_truths) -> list:
    """(prediction box, gt box) for every gt that has a prediction in its frame."""
    by_frame = {}
    for p in predictions:
        by_frame.setdefault(p.frame_id, []).append(p.box)
    out = []
    for g in ground_truths:
        cands = by_frame.get(g.frame_id)
        if cands:
            d = [np.linalg.norm(b.centre - g.box.centre) for b in cands]
            out.append((cands[int(np.argmin(d))], g.box))
    return out


def evaluate(predictions, ground_truths, gt_difficulty, threshold=0.5) -> EvalReport:
    """Full report.

    Args:
      predictions: list of Detection3D (scored boxes) with unique ``ident``.
      ground_truths: list of Detection3D. Yaw and centre errors compare each
        ground truth with the nearest-centre prediction of its frame.
      gt_difficulty: bucket index per ground truth (see ``synthetic_difficulty``).
    """
    rep = EvalReport()
    gt_difficulty = list(gt_difficulty)
    for k, name in enumerate(DIFFICULTIES):
        # harder buckets include the easier ones; boxes outside are ignored
        gts = [Detection3D(g.frame_id, g.box, g.ident, ignore=gt_difficulty[i] > k)
               for i, g in enumerate(ground_truths)]
        rep.ap_bev[name], rep.ap_3d[name] = {}, {}
        for fn, store, tag in ((bev_iou, rep.ap_bev, "bev"), (iou_3d, rep.ap_3d, "3d")):
            _, tp, ign, n_gt = match_detections(predictions, gts, fn, threshold)
            prec, rec = pr_curve(tp, ign, n_gt) if n_gt else (np.zeros(0), np.zeros(0))
            store[name] = {str(n): (interpolated_ap(prec, rec, n) if n_gt else 0.0) for n in (11, 40)}
            rep.curves[f"{tag}_{name}"] = {"precision": prec.tolist(), "recall": rec.tolist()}
        rep.counts[f"gt_{name}"] = sum(1 for g in gts if not g.ignore)
    rep.counts["predictions"] = len(predictions)
    rep.counts["ground_truths"] = len(ground_truths)
    paired = nearest_pairs(predictions, ground_truths)
    if paired:
        yaw = np.array([yaw_error_deg(p.yaw, g.yaw) for p, g in paired])
        cen = np.array([np.linalg.norm(p.centre - g.centre) for p, g in paired])
        rep.yaw_error_mean_deg = float(yaw.mean())
        rep.yaw_error_median_deg = float(np.median(yaw))
        rep.centre_error_median_m = float(np.median(cen))
    return rep


# -- SVG overlay -----------------------------------------------------------


def bev_svg(gt_boxes, pred_boxes, scale: float = 10.0, margin: float = 2.0) -> str:
    """Top-down view: x to the right, z upwards; ground truth red, predictions green."""
    polys = [b.footprint() for b in list(gt_boxes) + list(pred_boxes)]
    if polys:
        allp = np.concatenate(polys)
        xmin, zmin = allp.min(axis=0) - margin
        xmax, zmax = allp.max(axis=0) + margin
    else:
        xmin, zmin, xmax, zmax = -1.0, -1.0, 1.0, 1.0
    w, h = (xmax - xmin) * scale, (zmax - zmin) * scale
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.1f}" height="{h:.1f}" '
           f'viewBox="0 0 {w:.1f} {h:.1f}">',
           f'<rect width="{w:.1f}" height="{h:.1f}" fill="white"/>']
    for boxes, colour in ((gt_boxes, "red"), (pred_boxes, "green")):
        for b in boxes:
            fp = b.footprint()
            pts = " ".join(f"{(x - xmin) * scale:.2f},{(zmax - z) * scale:.2f}" for x, z in fp)
            out.append(f'<polygon points="{pts}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
