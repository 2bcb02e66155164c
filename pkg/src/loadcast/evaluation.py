"""Forecast metrics, weekly reporting slices, residual normality analysis,
and the three-arm ablation harness."""

from __future__ import annotations

import datetime as dt
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace as dc_replace
from typing import Sequence

import numpy as np

from .data import DatasetSplit, FeatureMatrix, NormStats
from .errors import DataError
from .model import DayPrediction, ModelConfig, ModelParams, predict_day
from .training import StageSchedule, train_stage1, train_stage2


def daily_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    """Daily accuracy in percent: ``100 * (1 - rms((pred - truth) / truth))``.

    Undefined when any actual load is zero.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DataError(f"daily_accuracy shapes differ: {pred.shape} vs {truth.shape}")
    if np.any(truth == 0.0):
        raise DataError("daily accuracy undefined: an actual load value is zero")
    rel = (pred - truth) / truth
    return float((1.0 - np.sqrt(np.mean(rel ** 2))) * 100.0)


def daily_mean_error(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean absolute error over the day, in load units."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DataError(f"daily_mean_error shapes differ: {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(truth - pred)))


# -- report assembly -------------------------------------------------------------


@dataclass
class DayScore:
    date: dt.date
    day_type: str
    a_d: float
    e_d: float


@dataclass
class EvalReport:
    """Per-day scores plus the four comparison slices."""

    days: list[DayScore]
    slices: dict[str, tuple[float, float]]  # name -> (A_d, E_d)
    timing_ms: float | None = None

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("row,label,day_type,a_d,e_d\n")
            for day in self.days:
                fh.write(f"day,{day.date.isoformat()},{day.day_type},"
                         f"{day.a_d!r},{day.e_d!r}\n")
            for name, (a, e) in self.slices.items():
                fh.write(f"slice,{name},,{a!r},{e!r}\n")

    def to_text(self) -> str:
        lines = [f"{'slice':<12}{'A_d/%':>10}{'E_d':>12}"]
        for name, (a, e) in self.slices.items():
            lines.append(f"{name:<12}{a:>10.2f}{e:>12.2f}")
        if self.timing_ms is not None:
            lines.append(f"single-day prediction: {self.timing_ms:.1f} ms (median)")
        return "\n".join(lines)


def evaluate_series(dates: Sequence[dt.date], preds: np.ndarray, truths: np.ndarray,
                    rest_days: dict[dt.date, bool],
                    timing_ms: float | None = None) -> EvalReport:
    """Per-day metrics and slice aggregates for a prediction window.

    Slices: the first day, the mean over workdays, the mean over rest
    days, and the mean over the whole window (named ``weekly`` for the
    usual 7-day window).
    """
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if len(dates) != len(preds) or preds.shape != truths.shape:
        raise DataError("evaluate_series needs one prediction and truth row per date")
    missing = [d for d in dates if d not in rest_days]
    if missing:
        raise DataError(f"calendar lacks day-type labels for {missing}")

    days = []
    for date, p, t in zip(dates, preds, truths):
        kind = "restday" if rest_days[date] else "workday"
        days.append(DayScore(date, kind, daily_accuracy(p, t), daily_mean_error(p, t)))

    def slice_mean(selected: list[DayScore]) -> tuple[float, float]:
        return (float(np.mean([d.a_d for d in selected])),
                float(np.mean([d.e_d for d in selected])))

    slices = {"first_day": (days[0].a_d, days[0].e_d)}
    workdays = [d for d in days if d.day_type == "workday"]
    restdays = [d for d in days if d.day_type == "restday"]
    if workdays:
        slices["workday"] = slice_mean(workdays)
    if restdays:
        slices["restday"] = slice_mean(restdays)
    slices["weekly"] = slice_mean(days)
    return EvalReport(days=days, slices=slices, timing_ms=timing_ms)


def weekly_report(predictions: Sequence[DayPrediction], truths: np.ndarray,
                  rest_days: dict[dt.date, bool],
                  timing_ms: float | None = None) -> EvalReport:
    """The four-slice report over exactly 7 consecutive test days."""
    if len(predictions) != 7:
        raise DataError(f"weekly report needs exactly 7 days, got {len(predictions)}")
    dates = [p.target_date for p in predictions]
    for a, b in zip(dates, dates[1:]):
        if (b - a).days != 1:
            raise DataError(f"test days must be consecutive, found {a} -> {b}")
    preds = np.stack([p.y_refine for p in predictions])
    return evaluate_series(dates, preds, truths, rest_days, timing_ms)


def measure_predict_time(fm: FeatureMatrix, params: ModelParams, stats: NormStats,
                         calls: int = 100) -> float:
    """Median wall time of single-day prediction, in milliseconds."""
    samples = []
    for _ in range(calls):
        start = time.perf_counter()
        predict_day(fm, params, stats)
        samples.append((time.perf_counter() - start) * 1000.0)
    return float(statistics.median(samples))


# -- residual normality ------------------------------------------------------------


@dataclass
class ResidualAnalysis:
    """Standardized residual distribution over a test window.

    ``passed`` follows the two-standard-deviation count rule: the number
    of |z| > 2 points must stay strictly below 5% of the sample.
    """

    residuals: np.ndarray
    z: np.ndarray | None
    outlier_indices: list[tuple[int, int]]
    n_outliers: int
    threshold: float
    passed: bool | None
    note: str = ""

    def scatter_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("day,hour,z,flagged\n")
            if self.z is None:
                return
            flags = set(self.outlier_indices)
            for day in range(self.z.shape[0]):
                for hour in range(self.z.shape[1]):
                    fh.write(f"{day},{hour + 1},{float(self.z[day, hour])!r},"
                             f"{int((day, hour) in flags)}\n")


def outlier_count_passes(count: int, n: int) -> bool:
    """Strictly fewer than 5% of ``n`` points may sit beyond two sigma."""
    return count < 0.05 * n


def residual_analysis(preds: np.ndarray, truths: np.ndarray) -> ResidualAnalysis:
    """Standardize forecast residuals (actual minus predicted) pooled over
    the whole window and count the points beyond two standard deviations."""
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape:
        raise DataError(f"residual shapes differ: {preds.shape} vs {truths.shape}")
    e = truths - preds
    if e.ndim == 1:
        e = e.reshape(1, -1)
    std = float(e.std())
    n = e.size
    threshold = 0.05 * n
    if std == 0.0:
        return ResidualAnalysis(residuals=e, z=None, outlier_indices=[], n_outliers=0,
                                threshold=threshold, passed=None,
                                note="zero residual variance; analysis skipped")
    z = (e - e.mean()) / std
    days, hours = np.nonzero(np.abs(z) > 2.0)
    outliers = [(int(d), int(h)) for d, h in zip(days, hours)]
    return ResidualAnalysis(residuals=e, z=z, outlier_indices=outliers,
                            n_outliers=len(outliers), threshold=threshold,
                            passed=outlier_count_passes(len(outliers), n))


# -- ablation harness -----------------------------------------------------------


ARM_NAMES = ("conv", "conv_attn", "conv_attn_refine")
ARM_MODULES = {
    "conv": (True, False, False),
    "conv_attn": (True, True, False),
    "conv_attn_refine": (True, True, True),
}


@dataclass
class ArmResult:
    name: str
    per_seed: list[dict] = field(default_factory=list)

    def _agg(self, key: str) -> tuple[float, float]:
        vals = [s[key] for s in self.per_seed]
        return (float(np.mean(vals)), float(np.std(vals)))

    @property
    def a_d(self) -> tuple[float, float]:
        return self._agg("a_d")

    @property
    def e_d(self) -> tuple[float, float]:
        return self._agg("e_d")

    @property
    def median_a_d(self) -> float:
        return float(np.median([s["a_d"] for s in self.per_seed]))


@dataclass
class AblationReport:
    arms: list[ArmResult]
    seeds: list[int]
    test_dates: list[dt.date]

    def arm(self, name: str) -> ArmResult:
        return next(a for a in self.arms if a.name == name)

    def to_text(self) -> str:
        head = (f"{'feature_extraction':<20}{'initial_prediction':<20}"
                f"{'refinement':<12}{'A_d/%':>16}{'E_d':>16}")
        lines = [head]
        for arm in self.arms:
            fe, ip, rf = (("yes" if m else "no") for m in ARM_MODULES[arm.name])
            (a_mean, a_std), (e_mean, e_std) = arm.a_d, arm.e_d
            lines.append(f"{fe:<20}{ip:<20}{rf:<12}"
                         f"{a_mean:>10.2f} ± {a_std:<4.2f}{e_mean:>10.2f} ± {e_std:<4.2f}")
        return "\n".join(lines)

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("arm,seed,a_d,e_d,mean_abs_residual\n")
            for arm in self.arms:
                for row in arm.per_seed:
                    fh.write(f"{arm.name},{row['seed']},{row['a_d']!r},"
                             f"{row['e_d']!r},{row['mean_abs_residual']!r}\n")


def _weekly_metrics(params: ModelParams, split: DatasetSplit,
                    use_refinement: bool) -> dict:
    stats = split.stats
    preds, truths = [], []
    for fm, target in split.test:
        p = predict_day(fm, params, stats)
        preds.append(p.y_refine if use_refinement else p.y_init)
        truths.append(stats.denormalize("target", target))
    preds = np.stack(preds)
    truths = np.stack(truths)
    dates = [fm.target_date for fm, _ in split.test]
    report = evaluate_series(dates, preds, truths, split.rest_days)
    return {
        "a_d": report.slices["weekly"][0],
        "e_d": report.slices["weekly"][1],
        "mean_abs_residual": float(np.mean(np.abs(truths - preds))),
    }


def train_and_score_arms(task: tuple) -> dict[str, dict]:
    """Train all three arms for one seed and score them on the test week.

    Module-level so the ablation harness can fan seeds out to worker
    processes.  The attention arm's stage-1 network is reused as the
    backbone of the refinement arm.
    """
    split, config, sched1, sched2, seed = task
    results: dict[str, dict] = {}

    conv_cfg = dc_replace(config, n_encoder_layers=0, n_decoder_layers=0)
    _, ckpt_conv = train_stage1(split, conv_cfg, sched1, seed)
    results["conv"] = {"seed": seed, **_weekly_metrics(ckpt_conv.params, split, False)}

    _, ckpt_full = train_stage1(split, config, sched1, seed)
    results["conv_attn"] = {"seed": seed, **_weekly_metrics(ckpt_full.params, split, False)}

    _, ckpt_ref = train_stage2(split, ckpt_full, sched2, seed)
    results["conv_attn_refine"] = {"seed": seed,
                                   **_weekly_metrics(ckpt_ref.params, split, True)}
    return results


def run_ablation(split: DatasetSplit, config: ModelConfig,
                 schedules: tuple[StageSchedule, StageSchedule],
                 seeds: Sequence[int], jobs: int = 1) -> AblationReport:
    """Train and evaluate the three ablation arms on identical data and seeds.

    Arms: conv stack with the regression head only (zero attention
    layers), the full initial prediction network, and the full network
    plus residual refinement.
    """
    if not seeds:
        raise DataError("run_ablation needs at least one seed")
    if not split.test:
        raise DataError("run_ablation needs a test window")
    sched1, sched2 = schedules
    tasks = [(split, config, sched1, sched2, seed) for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            all_results = list(pool.map(train_and_score_arms, tasks))
    else:
        all_results = [train_and_score_arms(t) for t in tasks]

    arms = [ArmResult(name=name) for name in ARM_NAMES]
    for results in all_results:
        for arm in arms:
            arm.per_seed.append(results[arm.name])
    return AblationReport(arms=arms, seeds=list(seeds),
                          test_dates=[fm.target_date for fm, _ in split.test])
