"""``autolabel3d`` command line: synth, train, fit-direct, predict, track, eval, export-svg."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from . import kitti_io, pipeline
from .config import RunConfig
from .eval import Detection3D, bev_svg, evaluate, kitti_difficulty, synthetic_difficulty
from .geometry import CameraCalibration, builtin_car_template, filter_points_by_mask, load_obj
from .model import init_params, load_checkpoint, save_checkpoint, train
from .synth import DEFAULT_P2, load_dataset, make_dataset, save_dataset
from .tracking import Track, write_tracks

log = logging.getLogger("autolabel3d")

LOSS_LOG_FIELDS = ("epoch", "alignment", "yaw_ce", "consistency", "lr")


def _template(cfg: RunConfig):
    if cfg["template_obj"]:
        return load_obj(cfg["template_obj"])
    return builtin_car_template(*cfg["template_dims"])


def _synth_camera(cfg: RunConfig) -> CameraCalibration:
    return CameraCalibration(DEFAULT_P2, cfg["image_width"], cfg["image_height"])


def _label_path(directory: Path, frame: int) -> Path:
    return directory / f"{frame:06d}.txt"


def _split(ds, name):
    return [ds.instances[i] for i in ds.split_indices(name)]


def _frames_of(ds, split):
    """Frame ids of a split, including frames whose instances were all in it."""
    return sorted({inst.frame_id for inst in _split(ds, split)})


def _write_frame_labels(out_dir: Path, frames, per_frame_boxes, camera) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for f in frames:
        kitti_io.write_labels(_label_path(out_dir, f), per_frame_boxes.get(f, []), camera)


# -- commands -----------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out: Path) -> Path:
    ds = make_dataset(cfg.synth(), _template(cfg))
    save_dataset(ds, out)
    # ground truth in label form, one file per frame
    cam = _synth_camera(cfg)
    boxes = {}
    for inst in ds.instances:
        boxes.setdefault(inst.frame_id, []).append(inst.gt_box)
    _write_frame_labels(out / "label_2", range(ds.n_frames), boxes, cam)
    cfg.write(out / "run_config.json")
    return out


def cmd_track(cfg: RunConfig, dataset: Path, out: Path, split: str) -> Path:
    ds = load_dataset(dataset)
    idx = ds.split_indices(split)
    obs = pipeline.training_view([ds.instances[i] for i in idx])
    tracks = pipeline.tracks_for(obs, ds.ego, cfg.tracker())
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tracks(out, [Track(k, [(obs[i].frame_id, idx[i]) for i in tr]) for k, tr in enumerate(tracks)])
    cfg.write(Path(str(out) + ".run.json"))
    return out


def cmd_train(cfg: RunConfig, dataset: Path, checkpoint: Path, resume: bool) -> Path:
    tcfg = cfg.train()
    ds = load_dataset(dataset)
    mesh = _template(cfg)
    obs = pipeline.training_view(_split(ds, "train"))
    if not obs:
        raise ValueError(f"{dataset}: no training instances")
    data = pipeline.make_training_set(obs, ds.ego, cfg.tracker())
    params, optimizer, start = None, None, 0
    log_path = Path(str(checkpoint) + ".loss.csv")
    if resume:
        params, start, optimizer = load_checkpoint(checkpoint)
        if params.config.to_dict() != {**tcfg.to_dict(), "epochs": params.config.epochs}:
            log.warning("resuming with settings that differ from the checkpoint's")
        params.config = tcfg
    else:
        params = init_params(tcfg)
    if start >= tcfg.epochs:
        log.info("checkpoint already has %d epochs; nothing to do", start)
        return checkpoint
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    mode = "a" if resume and log_path.exists() else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOSS_LOG_FIELDS)

        def progress(rec):
            writer.writerow([rec["epoch"], repr(rec["alignment"]), repr(rec["yaw_ce"]),
                             repr(rec["consistency_centre"] + rec["consistency_front"]), repr(rec["lr"])])
            fh.flush()
            print(f"epoch {rec['epoch']} total {rec['total']:.4f} lr {rec['lr']:.2e}", file=sys.stderr)

        res = train(data, mesh, tcfg, params=params, optimizer=optimizer, start_epoch=start, progress=progress)
    save_checkpoint(checkpoint, res.params, res.epochs_completed, res.optimizer)
    cfg.write(Path(str(checkpoint) + ".run.json"))
    return checkpoint


def _synth_predict(cfg, ds, split, poses_fn):
    insts = _split(ds, split)
    mesh = _template(cfg)
    t0 = time.perf_counter()
    poses = poses_fn([i.points.points for i in insts], mesh)
    dt = time.perf_counter() - t0
    boxes = {}
    for inst, p in zip(insts, poses):
        boxes.setdefault(inst.frame_id, []).append(pipeline.boxes_for([p], mesh)[0])
    return boxes, len(insts), dt


def cmd_predict(cfg: RunConfig, checkpoint: Path, dataset: Path | None, kitti_root: Path | None,
                out: Path, split: str) -> Path:
    params, _, _ = load_checkpoint(checkpoint)
    bs = cfg["predict_batch_size"]
    if kitti_root is not None:
        boxes, frames, n, dt = _kitti_predict(cfg, params, kitti_root)
        cam = None
    else:
        ds = load_dataset(dataset)
        boxes, n, dt = _synth_predict(cfg, ds, split,
                                      lambda sets, mesh: pipeline.predict_poses(params, sets, bs))
        frames, cam = _frames_of(ds, split), _synth_camera(cfg)
    if kitti_root is not None:
        (out / "labels").mkdir(parents=True, exist_ok=True)
        for f, (blist, camera) in boxes.items():
            kitti_io.write_labels(_label_path(out / "labels", f), blist, camera)
    else:
        _write_frame_labels(out / "labels", frames, boxes, cam)
    rate = n / dt if dt > 0 else float("inf")
    print(f"predicted {n} instances in {dt:.3f} s ({rate:.1f} instances/s)", file=sys.stderr)
    cfg.write(out / "run_config.json")
    return out


def _kitti_predict(cfg, params, root: Path):
    """Frames are the sub-directories of ``root/masks``; each needs velodyne and calib files."""
    mesh = _template(cfg)
    frames = sorted(int(p.name) for p in (root / "masks").iterdir() if p.is_dir() and p.name.isdigit())
    out, n, dt = {}, 0, 0.0
    for f in frames:
        calib = kitti_io.read_calib(root / "calib" / f"{f:06d}.txt")
        cloud = kitti_io.velo_to_cam(calib, kitti_io.read_velodyne(root / "velodyne" / f"{f:06d}.bin"))
        masks = kitti_io.read_masks(root / "masks" / f"{f:06d}")
        cam = calib.camera(*masks[0][0].bitmap.shape[::-1]) if masks else calib.camera(cfg["image_width"],
                                                                                         cfg["image_height"])
        sets, scores = [], []
        for mask, _meta in masks:
            pts = filter_points_by_mask(cam, cloud, mask).points
            if len(pts) >= 5:
                sets.append(pts)
                scores.append(mask.score)
        t0 = time.perf_counter()
        poses = pipeline.predict_poses(params, sets, cfg["predict_batch_size"]) if sets else []
        dt += time.perf_counter() - t0
        n += len(sets)
        out[f] = (pipeline.boxes_for(poses, mesh, scores), cam)
    return out, frames, n, dt


def cmd_fit_direct(cfg: RunConfig, dataset: Path, out: Path, split: str) -> Path:
    tcfg = cfg.train()
    ds = load_dataset(dataset)

    def fit(sets, mesh):
        return [pipeline.fit_direct(s, mesh, tcfg.bins)[0] for s in sets]

    boxes, n, dt = _synth_predict(cfg, ds, split, fit)
    _write_frame_labels(out / "labels", _frames_of(ds, split), boxes, _synth_camera(cfg))
    print(f"fitted {n} instances in {dt:.3f} s", file=sys.stderr)
    cfg.write(out / "run_config.json")
    return out


def read_label_dir(directory: Path, kind: str = "Car") -> dict:
    """frame id -> list of KittiLabel of the given type."""
    out = {}
    for p in sorted(directory.glob("*.txt")):
        if p.stem.isdigit():
            out[int(p.stem)] = [lab for lab in kitti_io.read_labels(p) if lab.type == kind]
    return out


def _synth_ground_truth(directory: Path, frames):
    ds = load_dataset(directory)
    wanted = set(frames)
    gts, diff = [], []
    for k, inst in enumerate(ds.instances):
        if inst.frame_id in wanted:
            gts.append(Detection3D(inst.frame_id, inst.gt_box, k))
            diff.append(synthetic_difficulty(inst.n_inliers))
    return gts, diff


def evaluate_dirs(pred_dir: Path, gt_dir: Path, threshold: float = 0.5):
    """Report for a label directory against labels or a synthetic dataset directory."""
    preds_by_frame = read_label_dir(pred_dir)
    preds = []
    for f in sorted(preds_by_frame):
        for lab in preds_by_frame[f]:
            preds.append(Detection3D(f, lab.to_box(), len(preds)))
    if (gt_dir / "scenes.jsonl").exists():
        gts, diff = _synth_ground_truth(gt_dir, preds_by_frame.keys())
    else:
        gt_by_frame = read_label_dir(gt_dir)
        gts, diff = [], []
        for f in sorted(gt_by_frame):
            if f not in preds_by_frame:
                continue
            for lab in gt_by_frame[f]:
                gts.append(Detection3D(f, lab.to_box(), len(gts)))
                diff.append(kitti_difficulty(lab.bbox[3] - lab.bbox[1], lab.occluded, lab.truncated))
    return evaluate(preds, gts, diff, threshold)


def cmd_eval(cfg: RunConfig, pred_dir: Path, gt_dir: Path, out: Path | None):
    rep = evaluate_dirs(pred_dir, gt_dir, cfg["iou_threshold"])
    print(rep.table())
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rep.to_json() + "\n")
        cfg.write(Path(str(out) + ".run.json"))
    return rep


def cmd_export_svg(cfg: RunConfig, pred_dir: Path, gt_dir: Path, out: Path, frames=None) -> list:
    preds = read_label_dir(pred_dir)
    if (gt_dir / "scenes.jsonl").exists():
        gts = {}
        for inst in load_dataset(gt_dir).instances:
            gts.setdefault(inst.frame_id, []).append(inst.gt_box)
    else:
        gts = {f: [lab.to_box() for lab in labs] for f, labs in read_label_dir(gt_dir).items()}
    frames = sorted(preds) if frames is None else frames
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for f in frames:
        path = out / f"{f:06d}.svg"
        path.write_text(bev_svg(gts.get(f, []), [lab.to_box() for lab in preds.get(f, [])]))
        written.append(path)
    return written


# -- argument parsing ---------------------------------------------------------


def _global_flags(defaults):
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=defaults, help="JSON run configuration")
    p.add_argument("--set", metavar="K=V", action="append", default=defaults,
                   help="override one configuration key (repeatable)")
    p.add_argument("--seed", type=int, default=defaults, help="seed for data and training")
    p.add_argument("-v", "--verbose", action="store_true", default=defaults)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autolabel3d", parents=[_global_flags(None)],
                                     description="Label-free 3D box fitting from masks and LiDAR.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _global_flags(argparse.SUPPRESS)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, help="dataset directory (default: dataset_dir)")

    p = sub.add_parser("train", parents=[common], help="train the pose network")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint")

    p = sub.add_parser("fit-direct", parents=[common], help="per-instance fitting without learning")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--split", choices=("train", "heldout"), default="heldout")

    p = sub.add_parser("predict", parents=[common], help="write KITTI labels for a split or KITTI frames")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--kitti-root", type=Path,
                   help="directory with velodyne/, calib/ and masks/<frame>/ (instead of --dataset)")
    p.add_argument("--out", type=Path)
    p.add_argument("--split", choices=("train", "heldout"), default="heldout")

    p = sub.add_parser("track", parents=[common], help="build training tracks")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--out", type=Path, help="tracks JSONL path")
    p.add_argument("--split", choices=("train", "heldout"), default="train")

    p = sub.add_parser("eval", parents=[common], help="score predicted labels")
    p.add_argument("--pred", type=Path, required=True, help="directory of predicted label files")
    p.add_argument("--gt", type=Path, required=True, help="label directory or synthetic dataset")
    p.add_argument("--out", type=Path, help="report JSON path")

    p = sub.add_parser("export-svg", parents=[common], help="bird's-eye overlays")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--frames", type=int, nargs="*")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config, args.set or (), args.seed)
        dataset = getattr(args, "dataset", None) or Path(cfg["dataset_dir"])
        out = getattr(args, "out", None)
        out_dir = out or Path(cfg["output_dir"])
        if args.command == "synth":
            cmd_synth(cfg, out or dataset)
        elif args.command == "train":
            cmd_train(cfg, dataset, args.checkpoint or Path(cfg["checkpoint"]), args.resume)
        elif args.command == "fit-direct":
            cmd_fit_direct(cfg, dataset, out_dir, args.split)
        elif args.command == "predict":
            cmd_predict(cfg, args.checkpoint or Path(cfg["checkpoint"]),
                        None if args.kitti_root else dataset, args.kitti_root, out_dir, args.split)
        elif args.command == "track":
            cmd_track(cfg, dataset, out or out_dir / "tracks.jsonl", args.split)
        elif args.command == "eval":
            cmd_eval(cfg, args.pred, args.gt, args.out)
        elif args.command == "export-svg":
            cmd_export_svg(cfg, args.pred, args.gt, args.out, args.frames)
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"autolabel3d {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
