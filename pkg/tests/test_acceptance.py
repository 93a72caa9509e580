"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict; the lines are printed together at the
end of the module so they show up even when output capture is on. The two
training criteria (5 and 6) take most of the runtime.
"""

import math
import struct
import time

import numpy as np
import pytest

from autolabel3d import kitti_io
from autolabel3d import pipeline as pl
from autolabel3d.cli import main
from autolabel3d.eval import Detection3D, average_precision, bev_iou, iou_3d, yaw_error_deg
from autolabel3d.geometry import (CameraCalibration, OrientedBox3D, Pose4DoF, apply_pose,
                                  closest_points_on_mesh)
from autolabel3d.losses import EgoChain, YawBins, consistency_loss, half_chamfer, half_chamfer_weighted
from autolabel3d.model import TrainConfig, init_params, train
from autolabel3d.synth import DEFAULT_P2, SynthConfig, make_dataset, sample_instance, sample_sequence
from autolabel3d.tracking import Detection, associate, build_tracks
from autolabel3d.losses import EgoMotion, yaw_bin_search

from conftest import dense_surface_distance
from gradcheck import check_inputs, check_parameters
from test_cli import trees_equal
from test_eval import brute_force_ap, mc_bev_iou, voxel_iou
from test_losses import golden_section
from test_tracking import shared_sensor_scene

VERDICTS = {}


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = [f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}" for k, (ok, detail) in sorted(VERDICTS.items())]
    for line in lines:
        print(line)
        if reporter is not None:
            reporter.write_line(line)


def verdict(n, ok, detail):
    VERDICTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def test_01_gradients(car):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, skipped, checked = 0.0, 0, 0
    for k in range(50):
        for w, s, n in (check_parameters(rng, car), check_inputs(rng, car)):
            worst, skipped, checked = max(worst, w), skipped + s, checked + n
    dt = time.perf_counter() - t0
    verdict(1, worst < 1e-4 and dt < 120 and skipped < checked // 20,
            f"worst rel err {worst:.2e} over {checked - skipped} coords ({skipped} tie coords skipped), {dt:.0f} s")


def test_02_variance_closed_form(car):
    rng = np.random.default_rng(2)
    worst = 0.0
    done = 0
    while done < 100:
        pose = Pose4DoF(rng.uniform(0, 2 * math.pi), [rng.uniform(-5, 5), 1.0, rng.uniform(5, 20)])
        p = apply_pose(pose, rng.normal(size=(1, 3)) * 2.5)
        r2 = half_chamfer(pose, car, p)
        if r2 < 1e-4:
            continue
        s = golden_section(lambda v: half_chamfer_weighted(pose, car, p, [v]), -12, 6)
        worst = max(worst, abs(math.exp(s) - r2) / r2,
                    abs(half_chamfer_weighted(pose, car, p, [s]) - (1 + math.log(r2))))
        done += 1
    verdict(2, worst < 1e-6, f"sigma^2 = r^2 and value 1 + log r^2 to {worst:.1e} on 100 residuals")


def test_03_chamfer_oracle(car):
    q = np.random.default_rng(3).uniform(-3, 3, size=(1000, 3))
    exact, _, _ = closest_points_on_mesh(q, car)
    oracle, res = dense_surface_distance(car, q)
    de, do = np.sqrt(exact), np.sqrt(oracle)
    gap = float(np.max(do - de))
    verdict(3, np.all(de <= do + 1e-12) and gap <= res,
            f"max gap {gap:.4f} m within resolution {res:.4f} m, exact never above oracle")


def test_04_bin_monotonicity(car):
    rng = np.random.default_rng(4)
    cfg = SynthConfig()
    bad = 0
    for _ in range(100):
        inst = sample_instance(rng, car, cfg)
        t = inst.gt_pose.translation + rng.normal(scale=0.2, size=3)
        pts = inst.points.points
        lv = rng.normal(-3, 1, len(pts))
        best = [yaw_bin_search(t, car, pts, lv, YawBins(n))[1] for n in (128, 64, 32, 16)]
        bad += not (best[0] <= best[1] <= best[2] <= best[3])
    verdict(4, bad == 0, f"{100 - bad}/100 instances monotone over 16/32/64/128 bins")


@pytest.fixture(scope="module")
def recovery_run(car):
    """The 64-bin model on 2,000 synthetic instances, 40 epochs."""
    t0 = time.perf_counter()
    ds = make_dataset(SynthConfig(n_instances=2000, seed=0))
    mesh = ds.config.template()
    train_set = [ds.instances[i] for i in ds.split_indices("train")]
    held = [ds.instances[i] for i in ds.split_indices("heldout")]
    data = pl.make_training_set(pl.training_view(train_set), ds.ego)
    res = train(data, mesh, TrainConfig(epochs=40, lr_decay_every_epochs=30, seed=0))
    poses = pl.predict_poses(res.params, [i.points.points for i in held])
    rep = pl.evaluate_dataset(held, pl.boxes_for(poses, mesh))
    return rep, time.perf_counter() - t0


@pytest.mark.slow
def test_05_synthetic_recovery(recovery_run):
    rep, dt = recovery_run
    ap = rep.ap_bev["hard"]["11"]
    ok = rep.yaw_error_median_deg < 5 and rep.centre_error_median_m < 0.2 and ap >= 0.85 and dt < 1800
    verdict(5, ok, f"median yaw {rep.yaw_error_median_deg:.2f} deg, median centre "
                   f"{rep.centre_error_median_m:.3f} m, AP_BEV {ap:.3f}, {dt / 60:.1f} min")


ABLATION = dict(n_instances=600, epochs=25, decay_every=20, batch_size=16)


@pytest.fixture(scope="module")
def ablation_runs(car):
    ds = make_dataset(SynthConfig(n_instances=ABLATION["n_instances"], seed=1, outlier_fraction=0.15))
    mesh = ds.config.template()
    train_set = [ds.instances[i] for i in ds.split_indices("train")]
    held = [ds.instances[i] for i in ds.split_indices("heldout")]
    data = pl.make_training_set(pl.training_view(train_set), ds.ego)
    variants = {
        "plain": dict(outlier_aware=False, weight_consistency=0.0),
        "outlier": dict(outlier_aware=True, weight_consistency=0.0),
        "outlier+cons": dict(outlier_aware=True, weight_consistency=1.0),
        "arctan": dict(outlier_aware=True, weight_consistency=1.0, yaw_head="arctan"),
    }
    out = {}
    for name, kw in variants.items():
        cfg = TrainConfig(epochs=ABLATION["epochs"], lr_decay_every_epochs=ABLATION["decay_every"],
                          batch_size=ABLATION["batch_size"], seed=1, **kw)
        params = train(data, mesh, cfg).params
        poses = pl.predict_poses(params, [i.points.points for i in held])
        rep = pl.evaluate_dataset(held, pl.boxes_for(poses, mesh))
        yaw_err = np.array([yaw_error_deg(p.yaw, i.gt_pose.yaw) for p, i in zip(poses, held)])
        out[name] = (rep.ap_bev["hard"]["11"], float(np.mean(yaw_err > 45)))
    return out


@pytest.mark.slow
def test_06_ablation_trends(ablation_runs):
    r = ablation_runs
    trends = (r["outlier"][0] > r["plain"][0], r["outlier+cons"][0] > r["outlier"][0],
              r["outlier+cons"][1] < r["arctan"][1])
    detail = (f"AP plain {r['plain'][0]:.3f} -> outlier-aware {r['outlier'][0]:.3f} -> +consistency "
              f"{r['outlier+cons'][0]:.3f}; >45 deg bins {r['outlier+cons'][1]:.3f} vs arctan {r['arctan'][1]:.3f}"
              f" [{' '.join('ok' if t else 'no' for t in trends)}]")
    verdict(6, all(trends), detail)


def test_07_equivariance(car):
    rng = np.random.default_rng(7)
    cfg = SynthConfig()
    worst = 0.0
    for t in range(100):
        insts, sensor = sample_sequence(rng, car, cfg, length=5, track_id=t)
        ego = EgoChain([P[:3, :4] for P in sensor])
        poses = [i.gt_pose for i in insts]
        for kp in (car.keypoint_centre, car.keypoint_front):
            worst = max(worst, consistency_loss(poses, ego, kp, horizon=5))
    verdict(7, worst < 1e-9, f"max consistency at ground truth {worst:.1e} over 100 tracks")


def test_08_metric_oracles():
    rng = np.random.default_rng(8)
    bev_worst = 0.0
    for _ in range(200):
        a = OrientedBox3D([rng.uniform(-1, 1), 0, rng.uniform(-1, 1)], rng.uniform([2, 1, 1], [5, 2.5, 2]),
                          rng.uniform(-math.pi, math.pi))
        b = OrientedBox3D([rng.uniform(-1, 1), 0, rng.uniform(-1, 1)], rng.uniform([2, 1, 1], [5, 2.5, 2]),
                          rng.uniform(-math.pi, math.pi))
        bev_worst = max(bev_worst, abs(bev_iou(a, b) - mc_bev_iou(a, b, rng, 500)))
    vox_worst = 0.0
    for _ in range(5):
        a = OrientedBox3D([rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(-1, 1)], (4.0, 1.6, 1.5),
                          rng.uniform(-3, 3))
        b = OrientedBox3D([rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(-1, 1)], (4.0, 1.6, 1.5),
                          rng.uniform(-3, 3))
        vox_worst = max(vox_worst, abs(iou_3d(a, b) - voxel_iou(a, b)))
    ap_worst = 0.0
    for _ in range(20):
        n_gt, n_pred = rng.integers(1, 4), rng.integers(1, 6)
        gts = [Detection3D(int(rng.integers(2)), OrientedBox3D([rng.uniform(-8, 8), 0, rng.uniform(-8, 8)],
                                                             (4.0, 1.6, 1.5), rng.uniform(0, 3)))
               for _ in range(n_gt)]
        preds = []
        for k in range(n_pred):
            g = gts[rng.integers(n_gt)]
            c = g.box.centre + [rng.normal(scale=0.8), 0, rng.normal(scale=0.8)]
            preds.append(Detection3D(g.frame_id, OrientedBox3D(c, g.box.dims, g.box.yaw + rng.normal(scale=0.2),
                                                               float(rng.uniform())), k))
        for n in (11, 40):
            ap_worst = max(ap_worst, abs(average_precision(preds, gts, n_points=n) - brute_force_ap(preds, gts, n)))
    verdict(8, bev_worst < 1e-3 and vox_worst < 2e-2 and ap_worst < 1e-12,
            f"BEV vs MC {bev_worst:.1e} (200 pairs), 3D vs voxels {vox_worst:.1e}, AP vs enumeration {ap_worst:.0e}")


def test_09_tracker():
    correct = total = 0
    for seed in range(50):
        rng = np.random.default_rng([9, seed])
        while True:
            c = [[rng.uniform(-10, 10), 0.9, rng.uniform(10, 30)] for _ in range(2)]
            if np.linalg.norm(np.subtract(c[0], c[1])) >= 5:
                break
        frames, ego, truth = shared_sensor_scene(rng, [Pose4DoF(rng.uniform(0, 2 * math.pi), p) for p in c])
        for t in build_tracks(frames, ego):
            for a, b in zip(t.instance_ids, t.instance_ids[1:]):
                total += 1
                correct += truth[a] == truth[b]
    rng = np.random.default_rng(99)
    pts = np.array([0, 1, 10]) + rng.normal(scale=0.3, size=(50, 3))
    rejected = associate([Detection(0, 0, pts)], [Detection(1, 1, pts + [2.5, 0, 0])], EgoMotion.identity()) == []
    verdict(9, total > 0 and correct == total and rejected,
            f"identity {correct}/{total} links over 50 scenes, 2.5 m pair {'rejected' if rejected else 'ACCEPTED'}")


def test_10_format_fidelity(tmp_path):
    rng = np.random.default_rng(10)
    checks = {}
    rec = rng.normal(scale=20, size=(300, 4)).astype("<f4")
    kitti_io.write_velodyne(tmp_path / "v.bin", rec[:, :3], rec[:, 3])
    checks["velodyne bitwise"] = (tmp_path / "v.bin").read_bytes() == rec.tobytes()

    poses = [Pose4DoF(rng.uniform(0, 6), rng.normal(size=3) * 10).matrix()[:3] for _ in range(20)]
    kitti_io.write_ego(tmp_path / "ego.txt", poses)
    back = kitti_io.read_ego(tmp_path / "ego.txt")
    checks["ego bitwise"] = all(np.array_equal(a, b) for a, b in zip(poses, back)) and len(back) == 20

    cam = CameraCalibration(DEFAULT_P2, 1242, 375)
    boxes = [OrientedBox3D([rng.uniform(-10, 10), rng.uniform(0.5, 1.5), rng.uniform(5, 40)],
                           rng.uniform([3, 1.4, 1.3], [5, 2, 1.8]), rng.uniform(0, 2 * math.pi),
                           float(rng.uniform())) for _ in range(30)]
    kitti_io.write_labels(tmp_path / "l.txt", boxes, cam)
    labs = kitti_io.read_labels(tmp_path / "l.txt")
    err = max(max(np.max(np.abs(lab.to_box().centre - b.centre)), np.max(np.abs(lab.to_box().dims - b.dims)),
                  abs(math.radians(yaw_error_deg(lab.to_box().yaw, b.yaw))), abs(lab.score - b.score))
              for lab, b in zip(labs, boxes))
    checks["labels 1e-2"] = len(labs) == 30 and err <= 1e-2 + 1e-12

    def located(path, content, needle, reader):
        p = tmp_path / path
        p.write_bytes(content) if isinstance(content, bytes) else p.write_text(content)
        try:
            reader(p)
        except kitti_io.FormatError as exc:
            return needle in str(exc)
        return False

    checks["malformed located"] = all([
        located("bad.bin", struct.pack("<5f", *range(5)), "byte offset", kitti_io.read_velodyne),
        located("bad_l.txt", "Car 0 0 0 0 0 0 0 1.5 1.6 4.0 1 1 x 0\n", "bad_l.txt:1", kitti_io.read_labels),
        located("bad_e.txt", "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0\n", "bad_e.txt:2", kitti_io.read_ego),
        located("bad_c.txt", "P2: 1 2 3\n", "bad_c.txt", kitti_io.read_calib),
    ])
    verdict(10, all(checks.values()), ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))


def test_11_determinism(tmp_path):
    tiny = ["--set", "encoder_widths=[8,16]", "--set", "head_hidden=8", "--set", "variance_hidden=8",
            "--set", "epochs=2", "--set", "n_instances=60", "--seed", "11"]
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["synth", *tiny, "--out", str(d / "data")]) == 0
        assert main(["train", *tiny, "--dataset", str(d / "data"), "--checkpoint", str(d / "m.al3d")]) == 0
        assert main(["predict", *tiny, "--dataset", str(d / "data"), "--checkpoint", str(d / "m.al3d"),
                     "--out", str(d / "pred")]) == 0
    same = {
        "dataset": trees_equal(tmp_path / "a" / "data", tmp_path / "b" / "data"),
        "checkpoint": (tmp_path / "a" / "m.al3d").read_bytes() == (tmp_path / "b" / "m.al3d").read_bytes(),
        "predictions": trees_equal(tmp_path / "a" / "pred" / "labels", tmp_path / "b" / "pred" / "labels"),
    }
    verdict(11, all(same.values()), ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))


def test_12_throughput(car):
    params = init_params(TrainConfig())
    rng = np.random.default_rng(12)
    cfg = SynthConfig(points_range=(200, 440))  # outliers come on top of the inliers
    sets = [sample_instance(rng, car, cfg).points.points for _ in range(64)]
    assert max(len(s) for s in sets) <= 512
    pl.predict_poses(params, sets[:2])  # warm-up
    t0 = time.perf_counter()
    poses = pl.predict_poses(params, sets, batch_size=64)
    dt = time.perf_counter() - t0
    verdict(12, len(poses) == 64 and dt < 1.0, f"64 instances in {dt:.3f} s ({64 / dt:.0f} instances/s)")
