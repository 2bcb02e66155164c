"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s``.  The scaled-down
experiments (criteria 6 and 7) train the three ablation arms over five
seeds on a deterministic 400-day synthetic dataset; everything is seeded,
so reruns reproduce the same numbers.
"""

import datetime as dt
import os
import time

import numpy as np
import pytest

import loadcast as lc
from loadcast import StageSchedule, Tensor

SEEDS = (0, 1, 2, 3, 4)
JOBS = min(2, os.cpu_count() or 1)


def report(criterion: int, passed: bool, detail: str) -> None:
    print(f"\n[criterion {criterion:2d}] {'PASS' if passed else 'FAIL'}: {detail}")
    assert passed, f"criterion {criterion}: {detail}"


@pytest.fixture(scope="module")
def synth_env():
    records = lc.synthesize_dataset(2024, 400)
    split = lc.split_train_test(records, records[-7].date, records[-1].date)
    config = lc.tiny_config()
    sched1 = StageSchedule(1, 32, 0.003, (30,), 50)
    sched2 = StageSchedule(2, 16, 0.01, (20,), 30)
    truths = np.stack([split.stats.denormalize("target", t) for _, t in split.test])
    return split, config, (sched1, sched2), truths


@pytest.fixture(scope="module")
def trained_arms(synth_env):
    split, config, schedules, _ = synth_env
    started = time.perf_counter()
    ablation = lc.run_ablation(split, config, schedules, seeds=SEEDS, jobs=JOBS)
    return ablation, time.perf_counter() - started


def test_criterion_1_full_model_gradients():
    budget_s = 120.0
    started = time.perf_counter()
    worst = 0.0
    config = lc.tiny_config()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = lc.init_params(config, seed)
        x = rng.random((2, 1, 9, 24))
        y = rng.random((2, 24))

        def loss():
            pred = lc.forward_initial(Tensor(x), params, training=True)
            return lc.batch_loss(pred, Tensor(y))

        err = lc.grad_check_params(loss, params.stage_params(1),
                                   samples_per_param=2, rng=rng)
        worst = max(worst, err)
    elapsed = time.perf_counter() - started
    report(1, worst < 1e-4 and elapsed < budget_s,
           f"max rel err {worst:.2e} (< 1e-4) over 20 seeds in {elapsed:.0f}s "
           f"(< {budget_s:.0f}s)")


def conv2d_oracle(x, k, stride):
    c_in, h, w = x.shape
    xp = np.zeros((c_in, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x
    h_out = (h - 1) // stride + 1
    w_out = (w - 1) // stride + 1
    out = np.zeros((k.shape[0], h_out, w_out))
    for o in range(k.shape[0]):
        for i in range(h_out):
            for j in range(w_out):
                acc = 0.0
                for c in range(c_in):
                    for di in range(3):
                        for dj in range(3):
                            acc += k[o, c, di, dj] * xp[c, i * stride + di,
                                                        j * stride + dj]
                out[o, i, j] = acc
    return out


def attention_oracle(x, wq, wk, wv):
    q, k, v = wq @ x, wk @ x, wv @ x
    scores = k.T @ q / np.sqrt(k.shape[0])
    e = np.exp(scores - scores.max(axis=0, keepdims=True))
    return v @ (e / e.sum(axis=0, keepdims=True))


def test_criterion_2_kernel_oracles():
    worst = {"conv2d": 0.0, "attention": 0.0, "day_loss": 0.0,
             "accuracy": 0.0, "mean_error": 0.0}
    for seed in range(100):
        r = np.random.default_rng(seed)

        x = r.standard_normal((2, r.integers(3, 7), r.integers(3, 8)))
        k = r.standard_normal((r.integers(1, 4), 2, 3, 3))
        stride = int(r.integers(1, 3))
        got = lc.conv2d(Tensor(x), Tensor(k), stride).data
        worst["conv2d"] = max(worst["conv2d"],
                              np.abs(got - conv2d_oracle(x, k, stride)).max())

        xa = r.standard_normal((4, 6))
        ws = [r.standard_normal((3, 4)) for _ in range(3)]
        got = lc.self_attention(Tensor(xa), *map(Tensor, ws)).data
        worst["attention"] = max(worst["attention"],
                                 np.abs(got - attention_oracle(xa, *ws)).max())

        pred, truth = r.random(24), r.random(24) + 0.5
        worst["day_loss"] = max(worst["day_loss"], abs(
            float(lc.mse_day_loss(Tensor(pred), Tensor(truth)).data)
            - np.sum((pred - truth) ** 2) / 24.0))
        worst["accuracy"] = max(worst["accuracy"], abs(
            lc.daily_accuracy(pred + truth, truth)
            - (1.0 - np.sqrt(np.mean((pred / truth) ** 2))) * 100.0))
        worst["mean_error"] = max(worst["mean_error"], abs(
            lc.daily_mean_error(pred, truth) - np.mean(np.abs(truth - pred))))
    bad = {name: err for name, err in worst.items() if err > 1e-12}
    report(2, not bad, f"100 randomized instances per kernel, worst errors "
           + ", ".join(f"{n}={e:.1e}" for n, e in worst.items()))


def test_criterion_3_preprocessing_oracle():
    loads = np.full(24, 500.0)
    loads[11] = 1500.0
    rec = lc.DailyRecord(dt.date(2021, 2, 3), loads, np.zeros(24))

    # independent oracle, computed step by step
    mu = loads.sum() / 24.0
    sigma = np.sqrt(((loads - mu) ** 2).sum() / 24.0)
    m = np.abs(loads - mu) / sigma
    oracle_flags = set(np.nonzero(m > 1.0)[0])

    check = lc.detect_anomalous_day(rec)
    cleaned, reps = lc.locate_and_replace_outliers(rec)
    after = lc.detect_anomalous_day(cleaned)
    ok = (abs(check.sigma - sigma) < 1e-12 and check.sigma > 140.0
          and oracle_flags == {11}
          and [r.hour for r in reps] == [12]
          and cleaned.loads[11] == 500.0
          and abs(m[11] - 4.795831523312719) < 1e-9
          and after.sigma < check.sigma)
    report(3, ok, f"sigma {check.sigma:.1f} > 140, m_spike {m[11]:.2f} > 1, "
           f"replaced with 500, sigma after {after.sigma:.1f}")


def test_criterion_4_residual_identity(synth_env):
    split, config, _, _ = synth_env
    params = lc.init_params(config, 9)
    params.tensors["s2.ffn.w2"].data[...] = np.random.default_rng(9).normal(
        0, 0.05, params.tensors["s2.ffn.w2"].shape)
    worst = 0.0
    exact = True
    for fm, target in split.test:
        pred = lc.predict_day(fm, params, split.stats)
        exact &= np.array_equal(pred.y_refine_norm,
                                pred.y_init_norm + pred.e_star_norm)
        e_init = target - pred.y_init_norm
        e_refine = target - pred.y_refine_norm
        worst = max(worst, np.abs((e_init - e_refine) - pred.e_star_norm).max())
    report(4, exact and worst < 1e-12,
           f"refined = initial + correction bitwise on 7 days; "
           f"(e_init - e_refine) vs correction max err {worst:.1e} (< 1e-12)")


def test_criterion_5_schedule_fidelity():
    s1, s2 = lc.stage1_defaults(), lc.stage2_defaults()
    checks = [
        lc.lr_schedule(1, s1) == 0.001, lc.lr_schedule(149, s1) == 0.001,
        lc.lr_schedule(150, s1) == 0.0005, lc.lr_schedule(299, s1) == 0.0005,
        lc.lr_schedule(300, s1) == 0.00025, lc.lr_schedule(500, s1) == 0.00025,
        lc.lr_schedule(1, s2) == 0.01, lc.lr_schedule(100, s2) == 0.005,
        lc.lr_schedule(200, s2) == 0.0025, lc.lr_schedule(300, s2) == 0.0025,
    ]
    report(5, all(checks), "0.001 -> 0.0005 -> 0.00025 at 150/300 and "
           "0.01 -> 0.005 -> 0.0025 at 100/200, exact")


def test_criterion_6_synthetic_end_to_end(synth_env, trained_arms):
    _, _, _, truths = synth_env
    ablation, elapsed = trained_arms
    budget_s = 900.0
    mean_load = truths.mean()
    arm = ablation.arm("conv_attn_refine")
    passes = sum(1 for row in arm.per_seed
                 if row["a_d"] >= 97.0 and row["e_d"] <= 0.03 * mean_load)
    detail = (f"{passes}/5 seeds with weekly A_d >= 97% and E_d <= 3% of mean "
              f"load ({0.03 * mean_load:.1f}); per-seed A_d "
              + ", ".join(f"{row['a_d']:.2f}" for row in arm.per_seed)
              + f"; training took {elapsed:.0f}s (< {budget_s:.0f}s)")
    report(6, passes >= 4 and elapsed < budget_s, detail)


def test_criterion_7_ablation_direction(trained_arms):
    ablation, _ = trained_arms
    med = [ablation.arm(n).median_a_d
           for n in ("conv", "conv_attn", "conv_attn_refine")]
    ordered = med[0] <= med[1] <= med[2]
    base = ablation.arm("conv_attn").per_seed
    refined = ablation.arm("conv_attn_refine").per_seed
    improved = sum(1 for b, r in zip(base, refined)
                   if r["mean_abs_residual"] < b["mean_abs_residual"])
    report(7, ordered and improved >= 3,
           f"median weekly A_d {med[0]:.2f} <= {med[1]:.2f} <= {med[2]:.2f}; "
           f"refinement shrinks mean |residual| in {improved}/5 seeds (need >= 3)")


def test_criterion_8_residual_normality_harness():
    # NOTE: the >= 90/100 clause is statistically unattainable as stated.
    # For 168 iid standard-normal residuals the |z|>2 count is ~Binomial
    # with mean 7.64 and sd 2.7, so a single window passes the strict
    # count < 8.4 rule with probability ~0.70 (0.64 without empirical
    # re-standardization); P(>= 90 passes in 100 seeds) ~ 1e-6.  The test
    # keeps the stated bound and is expected to fail on the first clause;
    # the 11-fail / 8-pass classification clause holds.
    passes = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        z_sample = r.standard_normal((7, 24))
        truth = np.full((7, 24), 100.0)
        analysis = lc.residual_analysis(truth - z_sample, truth)
        passes += bool(analysis.passed)
    classified = (not lc.outlier_count_passes(11, 168)
                  and lc.outlier_count_passes(8, 168))
    assert classified, "counts 11 -> fail and 8 -> pass must classify correctly"
    report(8, passes >= 90 and classified,
           f"{passes}/100 seeded standard-normal windows pass the <5% rule "
           f"(need >= 90; theoretical per-window pass probability is ~0.70, "
           f"so the stated bound cannot be met); counts 11 -> fail and "
           f"8 -> pass reproduced: {classified}")


def test_criterion_9_determinism_and_persistence(tmp_path):
    records = lc.synthesize_dataset(5, 100)
    split = lc.split_train_test(records, records[-7].date, records[-1].date)
    config = lc.tiny_config()
    sched = StageSchedule(1, 32, 0.003, (3,), 4)
    sched2 = StageSchedule(2, 16, 0.01, (2,), 3)

    def run():
        _, c = lc.train_stage1(split, config, sched, seed=3)
        r, c = lc.train_stage2(split, c, sched2, seed=3)
        preds = [lc.predict_day(fm, c.params, split.stats).y_refine
                 for fm, _ in split.test]
        return c, np.stack(preds)

    ckpt_a, preds_a = run()
    ckpt_b, preds_b = run()
    identical = (ckpt_a.loss_history == ckpt_b.loss_history
                 and np.array_equal(preds_a, preds_b))

    # resume: 2 epochs, checkpoint, then 2 more must replay epochs 3-4 exactly
    _, half = lc.train_stage1(split, config, StageSchedule(1, 32, 0.003, (), 2),
                              seed=3)
    _, resumed = lc.train_stage1(split, config, sched, seed=3, resume=half)
    resumed_ok = resumed.loss_history["stage1"] == ckpt_a.loss_history["stage1"]

    from loadcast.checkpoint import serialize_checkpoint
    path = tmp_path / "round.ckpt"
    lc.save_checkpoint(ckpt_a, str(path))
    round_ok = serialize_checkpoint(lc.load_checkpoint(str(path))) == path.read_bytes()

    report(9, identical and resumed_ok and round_ok,
           f"rerun losses/predictions identical: {identical}; "
           f"resume replays uninterrupted run: {resumed_ok}; "
           f"checkpoint round-trip byte-identical: {round_ok}")


@pytest.mark.skipif("LOADCAST_EXTERNAL_CSV" not in os.environ,
                    reason="set LOADCAST_EXTERNAL_CSV=<hourly csv> to run the "
                           "full-schedule external-data check")
def test_criterion_10_external_dataset(tmp_path):
    # Full default schedules on a user-supplied hourly dataset; no accuracy
    # target, only that the run completes and the four-slice report exists.
    from loadcast.cli import main
    dataset = os.environ["LOADCAST_EXTERNAL_CSV"]
    records, _ = lc.load_csv(dataset)
    test_end = records[-1].date
    test_start = test_end - dt.timedelta(days=6)
    conf = tmp_path / "ext.conf"
    conf.write_text(f"dataset = {dataset}\ntest_start = {test_start}\n"
                    f"test_end = {test_end}\noutput_dir = {tmp_path}\n")
    train_dir = tmp_path / "train"
    assert main(["train", "--config", str(conf), f"--run_dir={train_dir}"]) == 0
    pred_dir = tmp_path / "pred"
    assert main(["predict", "--config", str(conf),
                 f"--checkpoint={train_dir}/stage2.ckpt",
                 f"--run_dir={pred_dir}"]) == 0
    eval_dir = tmp_path / "eval"
    assert main(["evaluate", "--config", str(conf),
                 "--predictions", f"{pred_dir}/predictions.csv",
                 "--truths", dataset, f"--stats={train_dir}/norm_stats.json",
                 f"--run_dir={eval_dir}"]) == 0
    text = (eval_dir / "eval_report.txt").read_text()
    ok = all(name in text for name in ("first_day", "workday", "restday", "weekly"))
    report(10, ok, "full-schedule run completed; four-slice report emitted")
