import math

import numpy as np
import numpy.testing as npt
import pytest

from autolabel3d import autodiff as ad
from autolabel3d.losses import YawBins
from autolabel3d.model import (LOG_VAR_LIMIT, AdamState, Prediction, TrainConfig, TrainingSet,
                               batch_loss, decode_arctan, decode_pose, forward, forward_arctan,
                               init_params, load_checkpoint, make_batches, predict_batch,
                               save_checkpoint, train, zero_params)

from gradcheck import TINY, check_inputs, check_parameters, random_case


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


class TestAutodiff:
    def test_square(self):
        x = ad.param(3.0)
        (g,) = ad.grad(ad.square(x), [x])
        assert g == 6.0

    def test_max_routes_to_argmax(self):
        x = ad.param([1.0, 5.0, 2.0])
        (g,) = ad.grad(ad.max_reduce(x), [x])
        npt.assert_array_equal(g, [0.0, 1.0, 0.0])

    def test_max_tie_goes_to_first(self):
        x = ad.param([5.0, 5.0, 2.0])
        (g,) = ad.grad(ad.max_reduce(x), [x])
        npt.assert_array_equal(g, [1.0, 0.0, 0.0])

    def test_segment_max(self):
        x = ad.param([[1.0], [4.0], [3.0], [7.0], [2.0]])
        out = ad.segment_max(x, np.array([0, 3, 5]))
        npt.assert_array_equal(out.value, [[4.0], [7.0]])
        (g,) = ad.grad(ad.sum(out), [x])
        npt.assert_array_equal(g.ravel(), [0, 1, 0, 1, 0])

    def test_unsupported_primitive_fails_at_construction(self):
        with pytest.raises(TypeError):
            np.tanh(ad.param([1.0, 2.0]))

    def test_matmul_chain_vs_numpy(self, rng):
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
        A, Bm = ad.param(a), ad.param(b)
        ga, gb = ad.grad(ad.sum(ad.square(A @ Bm)), [A, Bm])
        npt.assert_allclose(ga, 2 * (a @ b) @ b.T)
        npt.assert_allclose(gb, 2 * a.T @ (a @ b))

    def test_softmax_cross_entropy(self):
        z = ad.param([[1.0, 2.0, 0.5]])
        loss = ad.sum(ad.softmax_cross_entropy(z, np.array([1])))
        (g,) = ad.grad(loss, [z])
        p = np.exp([1.0, 2.0, 0.5]) / np.exp([1.0, 2.0, 0.5]).sum()
        npt.assert_allclose(g[0], p - [0, 1, 0])

    def test_atan2(self):
        y, x = ad.param(0.7), ad.param(-0.4)
        gy, gx = ad.grad(ad.atan2(y, x), [y, x])
        r2 = 0.7 ** 2 + 0.4 ** 2
        assert gy == pytest.approx(-0.4 / r2) and gx == pytest.approx(-0.7 / r2)


class TestConfig:
    def test_published_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.lr_decay_factor, c.lr_decay_every_epochs, c.epochs, c.batch_size) == \
            (3e-3, 0.3, 30, 150, 64)
        assert c.n_bins == 64

    def test_schedule(self):
        c = TrainConfig()
        assert c.lr_at(0) == 3e-3 and c.lr_at(29) == 3e-3
        assert c.lr_at(30) == pytest.approx(9e-4)
        assert c.lr_at(149) == pytest.approx(3e-3 * 0.3 ** 4)

    @pytest.mark.parametrize("bad", [dict(epochs=0), dict(learning_rate=0.0), dict(yaw_head="quat"),
                                     dict(batch_size=-1)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_dict_round_trip(self):
        c = tiny(seed=4)
        assert TrainConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rat": 1.0})


class TestForward:
    def test_permutation(self, rng):
        params = init_params(tiny())
        pts = rng.normal(size=(40, 3)) + [0, 1, 12]
        perm = rng.permutation(40)
        a, b = forward(params, pts), forward(params, pts[perm])
        npt.assert_array_equal(a.translation, b.translation)
        npt.assert_array_equal(a.yaw_logits, b.yaw_logits)
        npt.assert_array_equal(a.log_var[perm], b.log_var)

    def test_zero_params(self, rng):
        pts = rng.normal(size=(11, 3))
        p = forward(zero_params(tiny()), pts)
        npt.assert_array_equal(p.translation, np.median(pts, axis=0))
        assert np.all(p.yaw_logits == p.yaw_logits[0])

    def test_translation_equivariance(self, rng):
        params = init_params(tiny())
        pts = rng.normal(size=(30, 3)) + [2, 1, 15]
        v = np.array([3.5, -0.2, 7.0])
        a, b = forward(params, pts), forward(params, pts + v)
        assert np.max(np.abs(b.translation - a.translation - v)) <= 1e-9

    def test_log_var_clamped(self, rng):
        params = init_params(tiny())
        params.arrays["var.1.b"][:] = 1e3
        assert np.all(forward(params, rng.normal(size=(5, 3))).log_var == LOG_VAR_LIMIT)
        params.arrays["var.1.b"][:] = -1e3
        assert np.all(forward(params, rng.normal(size=(5, 3))).log_var == -LOG_VAR_LIMIT)

    def test_deterministic(self, rng):
        pts = rng.normal(size=(25, 3))
        a = forward(init_params(tiny(seed=3)), pts)
        b = forward(init_params(tiny(seed=3)), pts)
        assert a.translation.tobytes() == b.translation.tobytes()
        assert a.yaw_logits.tobytes() == b.yaw_logits.tobytes()

    def test_batch_matches_single(self, rng):
        params = init_params(tiny())
        sets = [rng.normal(size=(n, 3)) for n in (3, 17, 8)]
        for s, p in zip(sets, predict_batch(params, sets)):
            q = forward(params, s)
            npt.assert_allclose(p.translation, q.translation, atol=1e-12)
            npt.assert_allclose(p.log_var, q.log_var, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            forward(init_params(tiny()), np.zeros((0, 3)))

    def test_separate_variance_encoder(self, rng):
        params = init_params(tiny(separate_variance_encoder=True))
        assert any(n.startswith("venc.") for n in params.names())
        assert forward(params, rng.normal(size=(6, 3))).log_var.shape == (6,)


class TestDecode:
    def test_one_hot(self):
        bins = YawBins(64)
        for k, yaw in ((0, 0.0), (16, math.pi / 2)):
            logits = np.zeros(64)
            logits[k] = 1.0
            assert decode_pose(Prediction(np.zeros(3), np.zeros(1), logits), bins).yaw == pytest.approx(yaw)

    def test_scan_oracle(self, rng):
        bins = YawBins(64)
        for _ in range(20):
            logits = rng.normal(size=64)
            best = 0
            for k in range(64):
                if logits[k] > logits[best]:
                    best = k
            assert decode_pose(Prediction(np.zeros(3), np.zeros(1), logits), bins).yaw == bins.centre(best)

    def test_arctan(self, rng):
        assert decode_arctan(0.0, 1.0) == 0.0
        assert decode_arctan(1.0, 0.0) == pytest.approx(math.pi / 2)
        assert decode_arctan(0.0, 0.0) == 0.0
        for x1, x2 in rng.normal(size=(50, 2)):
            assert decode_arctan(x1, x2) == pytest.approx(math.atan2(x1, x2) % (2 * math.pi))

    def test_arctan_head(self, rng):
        params = init_params(tiny(yaw_head="arctan"))
        p = forward_arctan(params, rng.normal(size=(9, 3)))
        assert p.yaw_logits is None and 0 <= decode_pose(p).yaw < 2 * math.pi
        with pytest.raises(ValueError):
            forward_arctan(init_params(tiny()), rng.normal(size=(9, 3)))


class TestGradients:
    def test_parameters(self, car):
        rng = np.random.default_rng(10)
        for _ in range(3):
            worst, skipped, n = check_parameters(rng, car)
            assert worst < 1e-4 and skipped < n // 4

    def test_prediction_inputs(self, car):
        rng = np.random.default_rng(11)
        for _ in range(3):
            worst, skipped, n = check_inputs(rng, car)
            assert worst < 1e-4 and skipped < n // 4

    def test_arctan_and_plain(self, car):
        rng = np.random.default_rng(12)
        worst, skipped, n = check_parameters(rng, car, yaw_head="arctan", outlier_aware=False)
        assert worst < 1e-4 and skipped < n // 4


def tiny_set(car, rng, n_tracks=4, length=3):
    clouds, frames, tracks = [], [], []
    for t in range(n_tracks):
        case = random_case(rng, car, n_points=12, n_frames=length)
        tracks.append(list(range(len(clouds), len(clouds) + length)))
        clouds.extend(case.points)
        frames.extend([t * length + f for f in range(length)])
    from autolabel3d.losses import EgoChain
    ego = EgoChain([np.eye(3, 4)] * len(clouds), sequence_ids=np.repeat(np.arange(n_tracks), length))
    return TrainingSet(clouds, frames, tracks, ego)


class TestTraining:
    def test_batches_keep_tracks(self, rng):
        tracks = [[0, 1, 2], [3, 4], [7, 8, 9, 10, 11]]
        for seed in range(20):
            batches = make_batches(15, tracks, 4, np.random.default_rng(seed))
            assert sorted(i for b in batches for i in b) == list(range(15))
            where = {i: k for k, b in enumerate(batches) for i in b}
            for tr in tracks:
                assert len({where[i] for i in tr}) == 1

    def test_deterministic(self, car):
        data = tiny_set(car, np.random.default_rng(0))
        cfg = tiny(epochs=2, batch_size=6)
        a = train(data, car, cfg)
        b = train(data, car, cfg)
        assert a.params.flat().tobytes() == b.params.flat().tobytes()
        assert a.history == b.history

    def test_resume_equals_uninterrupted(self, car, tmp_path):
        data = tiny_set(car, np.random.default_rng(1))
        cfg = tiny(epochs=4, batch_size=6, lr_decay_every_epochs=2)
        full = train(data, car, cfg)
        half = train(data, car, tiny(epochs=2, batch_size=6, lr_decay_every_epochs=2))
        save_checkpoint(tmp_path / "m.al3d", half.params, 2, half.optimizer)
        params, done, opt = load_checkpoint(tmp_path / "m.al3d")
        rest = train(data, car, cfg, params=params, optimizer=opt, start_epoch=done)
        assert rest.params.flat().tobytes() == full.params.flat().tobytes()
        assert [h["lr"] for h in full.history] == [3e-3, 3e-3, 9e-4, 9e-4]
        assert [h["lr"] for h in rest.history] == [9e-4, 9e-4]

    def test_overfit_single_instance(self, car):
        rng = np.random.default_rng(2)
        case = random_case(rng, car, n_points=60, n_frames=1)
        data = TrainingSet(case.points, [0])
        # Adam at the full base rate oscillates on one instance; a smaller
        # base rate with the default decay isolates the descent property
        res = train(data, car, TrainConfig(epochs=200, batch_size=1, learning_rate=1e-4))
        align = np.array([h["alignment"] for h in res.history])
        assert np.all(np.diff(align[20:]) <= 1e-9)
        assert align[-1] < align[0]

    def test_training_sees_no_ground_truth(self):
        from dataclasses import fields
        assert {f.name for f in fields(TrainingSet)} == {"points", "frame_ids", "tracks", "ego"}

    def test_non_finite_named(self, car):
        data = TrainingSet([np.array([[0.0, 1.0, 10.0], [np.nan, 0.0, 9.0]])], [0])
        with pytest.raises(FloatingPointError, match="instance 0"):
            train(data, car, tiny(epochs=1))

    def test_overlapping_tracks_rejected(self):
        with pytest.raises(ValueError):
            TrainingSet([np.zeros((2, 3))] * 3, [0, 1, 2], tracks=[[0, 1], [1, 2]])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_params(tiny(seed=9))
        opt = AdamState.zeros(params)
        opt.step = 7
        opt.m["enc.0.w"][:] = 0.25
        save_checkpoint(tmp_path / "c.al3d", params, 5, opt)
        back, done, bopt = load_checkpoint(tmp_path / "c.al3d")
        assert done == 5 and bopt.step == 7
        assert back.flat().tobytes() == params.flat().tobytes()
        assert back.config == params.config
        npt.assert_array_equal(bopt.m["enc.0.w"], 0.25)
        assert (tmp_path / "c.al3d.json").exists()

    def test_layout(self, tmp_path):
        import struct
        save_checkpoint(tmp_path / "c.al3d", init_params(tiny()))
        raw = (tmp_path / "c.al3d").read_bytes()
        assert raw[:4] == b"AL3D"
        version, _ = struct.unpack_from("<II", raw, 4)
        assert version == 1

    def test_bytes_identical(self, tmp_path):
        save_checkpoint(tmp_path / "a", init_params(tiny(seed=1)))
        save_checkpoint(tmp_path / "b", init_params(tiny(seed=1)))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "x")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "c", init_params(tiny()))
        raw = (tmp_path / "c").read_bytes()
        (tmp_path / "c").write_bytes(raw[:-8])
        with pytest.raises(ValueError, match="expected"):
            load_checkpoint(tmp_path / "c")

    def test_batch_loss_runs(self, car, rng):
        data = tiny_set(car, rng)
        b, leaves, _ = batch_loss(init_params(tiny()), data, [0, 1, 2], car)
        assert math.isfinite(b.total) and len(leaves) == len(init_params(tiny()).names())
