import dataclasses

import numpy as np
import numpy.testing as npt
import pytest

import loadcast as lc
from loadcast import StageSchedule, Tensor
from loadcast.checkpoint import serialize_checkpoint
from loadcast.errors import (CheckpointError, ContractError, DataError, NumericError)
from loadcast.training import _epoch_rng

TINY = lc.tiny_config()


def quick_schedules(e1=3, e2=2):
    s1 = StageSchedule(1, 16, 0.003, (max(e1 - 1, 1),), e1)
    s2 = StageSchedule(2, 16, 0.003, (max(e2 - 1, 1),), e2)
    return s1, s2


class TestLoss:
    def test_perfect_prediction_is_zero(self, rng):
        y = Tensor(rng.random(24))
        assert float(lc.mse_day_loss(y, Tensor(y.data.copy())).data) == 0.0

    def test_constant_offset_gives_delta_squared(self, rng):
        truth = rng.random(24)
        delta = 0.37
        loss = lc.mse_day_loss(Tensor(truth + delta), Tensor(truth))
        assert abs(float(loss.data) - delta ** 2) < 1e-12

    def test_matches_two_line_oracle(self):
        for seed in range(30):
            r = np.random.default_rng(seed)
            pred, truth = r.random(24), r.random(24)
            oracle = np.sum((pred - truth) ** 2) / 24.0
            got = float(lc.mse_day_loss(Tensor(pred), Tensor(truth)).data)
            assert abs(got - oracle) < 1e-14

    def test_length_mismatch_rejected(self):
        with pytest.raises(DataError):
            lc.mse_day_loss(Tensor(np.zeros(23)), Tensor(np.zeros(24)))

    def test_batch_of_identical_samples_equals_single_day(self, rng):
        pred, truth = rng.random(24), rng.random(24)
        single = float(lc.mse_day_loss(Tensor(pred), Tensor(truth)).data)
        batch = float(lc.batch_loss(Tensor(np.tile(pred, (5, 1))),
                                    Tensor(np.tile(truth, (5, 1)))).data)
        assert abs(batch - single) < 1e-15

    def test_batch_loss_is_mean_of_day_losses(self, rng):
        pred, truth = rng.random((4, 24)), rng.random((4, 24))
        days = [float(lc.mse_day_loss(Tensor(p), Tensor(t)).data)
                for p, t in zip(pred, truth)]
        got = float(lc.batch_loss(Tensor(pred), Tensor(truth)).data)
        assert abs(got - np.mean(days)) < 1e-15


class TestLrSchedule:
    def test_stage1_reference_points(self):
        s = lc.stage1_defaults()
        assert lc.lr_schedule(1, s) == 0.001
        assert lc.lr_schedule(149, s) == 0.001
        assert lc.lr_schedule(150, s) == 0.0005
        assert lc.lr_schedule(300, s) == 0.00025
        assert lc.lr_schedule(500, s) == 0.00025

    def test_stage2_reference_points(self):
        s = lc.stage2_defaults()
        assert lc.lr_schedule(1, s) == 0.01
        assert lc.lr_schedule(100, s) == 0.005
        assert lc.lr_schedule(250, s) == 0.0025

    def test_non_increasing_with_exact_halvings(self):
        s = StageSchedule(1, 8, 0.4, (5, 9, 17), 20)
        rates = [lc.lr_schedule(e, s) for e in range(1, 21)]
        assert all(b <= a for a, b in zip(rates, rates[1:]))
        assert rates[-1] == 0.4 * 0.5 ** 3

    def test_epoch_bounds(self):
        with pytest.raises(DataError):
            lc.lr_schedule(0, lc.stage1_defaults())
        with pytest.raises(DataError):
            lc.lr_schedule(501, lc.stage1_defaults())

    def test_defaults_match_contract(self):
        s1, s2 = lc.stage1_defaults(), lc.stage2_defaults()
        assert (s1.batch_size, s1.initial_lr, s1.milestones, s1.total_epochs) == \
            (32, 0.001, (150, 300), 500)
        assert (s2.batch_size, s2.initial_lr, s2.milestones, s2.total_epochs) == \
            (16, 0.01, (100, 200), 300)

    def test_bad_milestones_rejected(self):
        with pytest.raises(DataError):
            StageSchedule(1, 8, 0.1, (5, 5), 10).validate()
        with pytest.raises(DataError):
            StageSchedule(1, 8, 0.1, (10,), 10).validate()


class TestEpochShuffling:
    def test_deterministic_per_epoch_and_reshuffled_across(self):
        a = _epoch_rng(7, 1, 3).permutation(50)
        b = _epoch_rng(7, 1, 3).permutation(50)
        c = _epoch_rng(7, 1, 4).permutation(50)
        npt.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert sorted(a) == list(range(50))  # a permutation: every day once


class TestTrainStage1:
    def test_loss_drops_on_zero_noise_data(self):
        profile = lc.SyntheticProfile(noise_std=0.0, temp_noise_std=0.0)
        recs = lc.synthesize_dataset(0, 200, profile)
        split = lc.build_dataset(recs)
        sched = StageSchedule(1, 32, 0.003, (30,), 50)
        report, _ = lc.train_stage1(split, TINY, sched, seed=0)
        assert report.losses[-1] < 0.1 * report.losses[0]

    def test_same_seed_identical_curves(self, small_split):
        sched, _ = quick_schedules()
        r1, c1 = lc.train_stage1(small_split, TINY, sched, seed=5)
        r2, c2 = lc.train_stage1(small_split, TINY, sched, seed=5)
        assert r1.losses == r2.losses
        assert c1.params.snapshot_stage1() == c2.params.snapshot_stage1()

    def test_single_step_descends_at_small_lr(self, small_split):
        params = lc.init_params(TINY, 0)
        fm, target = small_split.train[0]
        x = Tensor(fm.values[None, None])
        y = Tensor(target[None])

        def f_j():
            return float(lc.batch_loss(
                lc.forward_initial(x, params, training=True), y).data)

        before = f_j()
        for p in params.stage_params(1).values():
            p.zero_grad()
        loss = lc.batch_loss(lc.forward_initial(x, params, training=True), y)
        lc.backward(loss)
        lc.adam_step(params.stage_params(1), None, lc.AdamState(lr=1e-5))
        assert f_j() < before

    def test_non_finite_loss_reports_coordinates(self, small_split):
        params = lc.init_params(TINY, 0)
        params.tensors["s1.head.w2"].data[...] = np.inf
        sched, _ = quick_schedules()
        ckpt = lc.Checkpoint(params=params, stats=small_split.stats, seed=0)
        with np.errstate(invalid="ignore"):
            with pytest.raises(NumericError, match="epoch 1, batch 0"):
                lc.train_stage1(small_split, TINY, sched, seed=0, resume=ckpt)

    def test_empty_split_rejected(self, small_split):
        empty = dataclasses.replace(small_split, train=[])
        with pytest.raises(DataError):
            lc.train_stage1(empty, TINY, quick_schedules()[0], seed=0)


class TestTrainStage2:
    @pytest.fixture()
    def stage1_ckpt(self, small_split):
        sched, _ = quick_schedules(e1=4)
        _, ckpt = lc.train_stage1(small_split, TINY, sched, seed=1)
        return ckpt

    def test_stage1_frozen_bitwise(self, small_split, stage1_ckpt):
        before = stage1_ckpt.params.snapshot_stage1()
        _, ckpt = lc.train_stage2(small_split, stage1_ckpt, quick_schedules()[1], seed=1)
        assert ckpt.params.snapshot_stage1() == before
        assert ckpt.params.stage2_trained

    def test_perfect_stage1_keeps_corrections_near_zero(self, small_split, stage1_ckpt):
        # make the refinement targets exactly zero by aligning the split's
        # labels with the stage-1 predictions
        params = stage1_ckpt.params
        x_all = np.stack([fm.values for fm, _ in small_split.train])[:, None]
        y_init = lc.training.predict_initial_all(params, x_all)
        aligned = dataclasses.replace(
            small_split,
            train=[(fm, y_init[i]) for i, (fm, _) in enumerate(small_split.train)])
        report, ckpt = lc.train_stage2(aligned, stage1_ckpt, quick_schedules()[1], seed=1)
        assert report.losses[-1] < 1e-10
        e = lc.refine_load(Tensor(x_all[:8, 0]), Tensor(y_init[:8]), ckpt.params)
        assert np.abs(e.data).max() < 1e-4

    def test_requires_trained_stage1(self, small_split):
        fresh = lc.Checkpoint(params=lc.init_params(TINY, 0),
                              stats=small_split.stats, seed=0)
        with pytest.raises(DataError, match="stage-1"):
            lc.train_stage2(small_split, fresh, quick_schedules()[1], seed=0)

    def test_drift_detected(self, small_split, stage1_ckpt, monkeypatch):
        import loadcast.training as tr

        def poisoned(params, grads, state):
            params_all = stage1_ckpt.params.tensors
            params_all["s1.conv1.kernel"].data[0, 0, 0, 0] += 1e-9
            return lc.adam_step(params, grads, state)

        monkeypatch.setattr(tr, "adam_step", poisoned)
        with pytest.raises(ContractError, match="stage-1"):
            tr.train_stage2(small_split, stage1_ckpt, quick_schedules()[1], seed=1)


class TestCheckpoint:
    @pytest.fixture()
    def trained(self, small_split):
        s1, s2 = quick_schedules()
        _, ckpt = lc.train_stage1(small_split, TINY, s1, seed=2)
        _, ckpt = lc.train_stage2(small_split, ckpt, s2, seed=2)
        return ckpt

    def test_round_trip_is_byte_identical(self, trained, tmp_path):
        path = tmp_path / "model.ckpt"
        lc.save_checkpoint(trained, str(path))
        reloaded = lc.load_checkpoint(str(path))
        assert serialize_checkpoint(reloaded) == path.read_bytes()
        assert reloaded.epochs == trained.epochs
        assert reloaded.stats == trained.stats
        assert reloaded.loss_history == trained.loss_history

    def test_reloaded_model_predicts_identically(self, trained, small_split, tmp_path):
        path = tmp_path / "model.ckpt"
        lc.save_checkpoint(trained, str(path))
        reloaded = lc.load_checkpoint(str(path))
        fm, _ = small_split.test[0]
        a = lc.predict_day(fm, trained.params, small_split.stats)
        b = lc.predict_day(fm, reloaded.params, small_split.stats)
        npt.assert_array_equal(a.y_refine, b.y_refine)

    def test_corrupted_byte_fails_checksum(self, trained, tmp_path):
        path = tmp_path / "model.ckpt"
        lc.save_checkpoint(trained, str(path))
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            lc.load_checkpoint(str(path))

    def test_truncation_detected(self, trained, tmp_path):
        path = tmp_path / "model.ckpt"
        lc.save_checkpoint(trained, str(path))
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(CheckpointError):
            lc.load_checkpoint(str(path))

    def test_bad_magic_rejected(self, trained, tmp_path):
        import hashlib
        path = tmp_path / "model.ckpt"
        lc.save_checkpoint(trained, str(path))
        blob = bytearray(path.read_bytes())[:-32]
        blob[:4] = b"XXXX"
        blob = bytes(blob)
        path.write_bytes(blob + hashlib.sha256(blob).digest())
        with pytest.raises(CheckpointError, match="magic"):
            lc.load_checkpoint(str(path))

    def test_version_mismatch_rejected(self, trained, tmp_path):
        import hashlib
        import struct
        path = tmp_path / "model.ckpt"
        lc.save_checkpoint(trained, str(path))
        blob = bytearray(path.read_bytes())[:-32]
        blob[4:8] = struct.pack("<I", 99)
        blob = bytes(blob)
        path.write_bytes(blob + hashlib.sha256(blob).digest())
        with pytest.raises(CheckpointError, match="version 99"):
            lc.load_checkpoint(str(path))

    def test_resume_reproduces_uninterrupted_run(self, small_split):
        sched = StageSchedule(1, 16, 0.003, (4,), 6)
        full_report, full_ckpt = lc.train_stage1(small_split, TINY, sched, seed=3)

        # same lr trajectory for epochs 1..3 (the milestone is not reached yet)
        short = StageSchedule(1, 16, 0.003, (), 3)
        _, half_ckpt = lc.train_stage1(small_split, TINY, short, seed=3)
        resumed_report, resumed_ckpt = lc.train_stage1(
            small_split, TINY, sched, seed=3, resume=half_ckpt)

        assert half_ckpt.loss_history["stage1"] + resumed_report.losses == \
            full_report.losses
        assert serialize_checkpoint(resumed_ckpt) == serialize_checkpoint(full_ckpt)


class TestGradClip:
    def test_clip_limits_update_magnitude(self, small_split):
        sched_free, _ = quick_schedules(e1=2)
        sched_clipped = dataclasses.replace(sched_free, grad_clip=1e-8)
        _, free = lc.train_stage1(small_split, TINY, sched_free, seed=4)
        _, clipped = lc.train_stage1(small_split, TINY, sched_clipped, seed=4)
        assert free.params.snapshot_stage1() != clipped.params.snapshot_stage1()


class TestLossCsv:
    def test_format(self, tmp_path):
        path = tmp_path / "loss.csv"
        lc.write_loss_csv(str(path), [(1, 1, 0.001, 0.5), (2, 1, 0.001, 0.25)])
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,stage,lr,loss"
        assert lines[1] == "1,1,0.001,0.5"
