"""Command-line entry point.

One flat key-value config file drives every command; any key can be
overridden on the command line as ``--key=value``.  Outputs land in a
fresh timestamped directory under ``output_dir`` (or exactly at
``--run-dir``) together with a copy of the resolved configuration.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import os
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (HOURS, NormStats, SyntheticProfile, build_feature_matrix,
                   clean_records, load_csv, save_csv, split_train_test,
                   synthesize_dataset)
from .errors import (CheckpointError, ConfigError, ContractError, DataError,
                     LoadcastError, MissingHistoryError, NumericError)
from .evaluation import (evaluate_series, measure_predict_time, residual_analysis,
                         run_ablation)
from .model import ModelConfig, predict_day
from .training import StageSchedule, train_stage1, train_stage2, write_loss_csv

_SCHEMA_KEYS = ("date", "hour", "load", "temp", "humidity", "rainfall", "holiday")


def _int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.split(",") if v.strip() != "")


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _date(raw: str) -> dt.date:
    return dt.date.fromisoformat(raw)


KEY_TYPES = {
    "dataset": str, "unit": str, "sigma_threshold": float, "seed": int,
    "output_dir": str, "run_dir": str, "checkpoint": str, "stats": str,
    "jobs": int, "timing_calls": int,
    "test_start": _date, "test_end": _date,
    "predict.start": _date, "predict.end": _date,
    "model.conv_channels": _int_list, "model.d_model": int, "model.n_heads": int,
    "model.n_encoder_layers": int, "model.n_decoder_layers": int,
    "model.ffn_hidden": int, "model.head_hidden": int, "model.gru_hidden": int,
    "model.refine_hidden": int, "model.n_queries": int, "model.dropout": float,
    "model.residual_skips": _bool,
    "stage1.batch_size": int, "stage1.initial_lr": float,
    "stage1.milestones": _int_list, "stage1.epochs": int, "stage1.grad_clip": float,
    "stage2.batch_size": int, "stage2.initial_lr": float,
    "stage2.milestones": _int_list, "stage2.epochs": int, "stage2.grad_clip": float,
    "ablate.seeds": _int_list,
    "synth.n_days": int, "synth.noise_std": float, "synth.temp_noise_std": float,
    "synth.start": _date, "synth.base_load": float,
}
KEY_TYPES.update({f"schema.{k}": str for k in _SCHEMA_KEYS})

DEFAULTS = {
    "unit": "kW", "sigma_threshold": 140.0, "seed": 0, "output_dir": "runs",
    "jobs": 1, "timing_calls": 100,
    "model.conv_channels": (16, 32, 32, 64, 64, 64, 64), "model.d_model": 64,
    "model.n_heads": 4, "model.n_encoder_layers": 2, "model.n_decoder_layers": 2,
    "model.ffn_hidden": 128, "model.head_hidden": 128, "model.gru_hidden": 32,
    "model.refine_hidden": 64, "model.n_queries": HOURS, "model.dropout": 0.0,
    "model.residual_skips": True,
    "stage1.batch_size": 32, "stage1.initial_lr": 0.001,
    "stage1.milestones": (150, 300), "stage1.epochs": 500, "stage1.grad_clip": 0.0,
    "stage2.batch_size": 16, "stage2.initial_lr": 0.01,
    "stage2.milestones": (100, 200), "stage2.epochs": 300, "stage2.grad_clip": 0.0,
    "ablate.seeds": (0, 1, 2), "synth.n_days": 400, "synth.noise_std": 4.0,
    "synth.temp_noise_std": 0.8, "synth.start": dt.date(2020, 1, 6),
    "synth.base_load": 500.0,
}


class RunConfig:
    """Typed view over the flat key-value configuration."""

    def __init__(self, values: dict):
        self.values = dict(DEFAULTS)
        self.values.update(values)

    @classmethod
    def parse(cls, path: str | None, overrides: list[str]) -> "RunConfig":
        values: dict = {}
        if path:
            if not os.path.exists(path):
                raise ConfigError(f"config file not found: {path}")
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    text = line.split("#", 1)[0].strip()
                    if not text:
                        continue
                    if "=" not in text:
                        raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                                          f"got {line.rstrip()!r}")
                    key, raw = (s.strip() for s in text.split("=", 1))
                    values[key] = cls._convert(key, raw, f"{path}:{lineno}")
        for item in overrides:
            if not item.startswith("--") or "=" not in item:
                raise ConfigError(f"override must look like --key=value, got {item!r}")
            key, raw = item[2:].split("=", 1)
            key = key.replace("-", "_")
            values[key] = cls._convert(key, raw, "command line")
        return cls(values)

    @staticmethod
    def _convert(key: str, raw: str, where: str):
        if key not in KEY_TYPES:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        try:
            return KEY_TYPES[key](raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from None

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def require(self, key: str):
        value = self.values.get(key)
        if value is None:
            raise ConfigError(f"config key {key!r} is required for this command")
        return value

    def require_path(self, key: str) -> str:
        path = self.require(key)
        if not os.path.exists(path):
            raise ConfigError(f"{key}: path does not exist: {path}")
        return path

    def schema(self) -> dict[str, str] | None:
        pairs = {k: self.values[f"schema.{k}"] for k in _SCHEMA_KEYS
                 if f"schema.{k}" in self.values}
        return pairs or None

    def model_config(self) -> ModelConfig:
        g = self.values
        cfg = ModelConfig(
            conv_channels=g["model.conv_channels"], d_model=g["model.d_model"],
            n_heads=g["model.n_heads"], n_encoder_layers=g["model.n_encoder_layers"],
            n_decoder_layers=g["model.n_decoder_layers"], ffn_hidden=g["model.ffn_hidden"],
            head_hidden=g["model.head_hidden"], gru_hidden=g["model.gru_hidden"],
            refine_hidden=g["model.refine_hidden"], n_queries=g["model.n_queries"],
            dropout=g["model.dropout"], residual_skips=g["model.residual_skips"])
        cfg.validate()
        return cfg

    def schedule(self, stage: int) -> StageSchedule:
        g = self.values
        sched = StageSchedule(
            stage=stage, batch_size=g[f"stage{stage}.batch_size"],
            initial_lr=g[f"stage{stage}.initial_lr"],
            milestones=g[f"stage{stage}.milestones"],
            total_epochs=g[f"stage{stage}.epochs"],
            grad_clip=g[f"stage{stage}.grad_clip"])
        sched.validate()
        return sched

    def test_window(self) -> tuple[dt.date, dt.date]:
        return self.require("test_start"), self.require("test_end")

    def resolved_text(self) -> str:
        stamp = dt.datetime.now(dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        lines = [f"# resolved configuration ({stamp})"]
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _make_run_dir(config: RunConfig, command: str) -> str:
    run_dir = config.get("run_dir")
    if run_dir is None:
        stamp = dt.datetime.now(dt.timezone.utc).strftime("%Y%m%d-%H%M%S-%f")
        run_dir = os.path.join(config.require("output_dir"), f"{command}-{stamp}")
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write(config.resolved_text())
    print(f"run dir: {run_dir}")
    return run_dir


def _load_cleaned(config: RunConfig):
    records, report = load_csv(config.require_path("dataset"), config.schema(),
                               config.require("unit"))
    cleaned, log = clean_records(records, config.require("sigma_threshold"))
    return cleaned, report, log


# -- commands ------------------------------------------------------------------


def cmd_synth(config: RunConfig) -> int:
    profile = SyntheticProfile(noise_std=config.require("synth.noise_std"),
                               temp_noise_std=config.require("synth.temp_noise_std"),
                               base_load=config.require("synth.base_load"),
                               start=config.require("synth.start"))
    records = synthesize_dataset(config.require("seed"), config.require("synth.n_days"),
                                 profile)
    run_dir = _make_run_dir(config, "synth")
    out = os.path.join(run_dir, "synthetic.csv")
    save_csv(records, out)
    print(f"wrote {len(records)} day(s) to {out}")
    return 0


def cmd_preprocess(config: RunConfig) -> int:
    config.require_path("dataset")
    run_dir = _make_run_dir(config, "preprocess")
    cleaned, report, log = _load_cleaned(config)
    out = os.path.join(run_dir, "cleaned.csv")
    save_csv(cleaned, out)
    with open(os.path.join(run_dir, "preprocess_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.summary() + "\n\n" + log.summary() + "\n")
    print(report.summary())
    print(log.summary())
    print(f"wrote cleaned data to {out}")
    return 0


def cmd_train(config: RunConfig, stage: str) -> int:
    config.require_path("dataset")
    model_cfg = config.model_config()
    sched1, sched2 = config.schedule(1), config.schedule(2)
    test_start, test_end = config.test_window()
    seed = config.require("seed")
    from_ckpt = config.get("checkpoint")
    if stage == "2" and from_ckpt is None:
        raise ConfigError("training stage 2 alone needs --checkpoint=<stage-1 file>")
    if from_ckpt is not None and not os.path.exists(from_ckpt):
        raise ConfigError(f"checkpoint: path does not exist: {from_ckpt}")

    run_dir = _make_run_dir(config, "train")
    cleaned, _, log = _load_cleaned(config)
    split = split_train_test(cleaned, test_start, test_end)
    print(f"{len(split.train)} training day(s), {len(split.test)} test day(s), "
          f"{len(split.skipped)} skipped (warmup), "
          f"{log.n_replacements} outlier(s) replaced")

    entries = []
    ckpt = None
    if stage in ("both", "1"):
        report1, ckpt = train_stage1(split, model_cfg, sched1, seed,
                                     checkpoint_dir=run_dir)
        entries += [(i + 1, 1, lr, loss) for i, (lr, loss)
                    in enumerate(zip(report1.lrs, report1.losses))]
        print(f"stage 1: {report1.epochs_run} epoch(s), final loss "
              f"{report1.losses[-1]:.6f}, {report1.wall_time_s:.1f}s")
        save_checkpoint(ckpt, os.path.join(run_dir, "stage1.ckpt"))
    if stage in ("both", "2"):
        if ckpt is None:
            ckpt = load_checkpoint(from_ckpt)
        report2, ckpt = train_stage2(split, ckpt, sched2, seed, checkpoint_dir=run_dir)
        entries += [(i + 1, 2, lr, loss) for i, (lr, loss)
                    in enumerate(zip(report2.lrs, report2.losses))]
        print(f"stage 2: {report2.epochs_run} epoch(s), final loss "
              f"{report2.losses[-1]:.6f}, {report2.wall_time_s:.1f}s")
        save_checkpoint(ckpt, os.path.join(run_dir, "stage2.ckpt"))

    write_loss_csv(os.path.join(run_dir, "loss_history.csv"), entries)
    split.stats.save_json(os.path.join(run_dir, "norm_stats.json"))
    return 0


def cmd_predict(config: RunConfig) -> int:
    ckpt_path = config.get("checkpoint")
    if ckpt_path is None:
        raise ConfigError("predict needs --checkpoint=<file>")
    if not os.path.exists(ckpt_path):
        raise ConfigError(f"checkpoint: path does not exist: {ckpt_path}")
    config.require_path("dataset")
    start = config.get("predict.start") or config.require("test_start")
    end = config.get("predict.end") or config.require("test_end")
    if end < start:
        raise ConfigError(f"prediction window inverted: {start}..{end}")

    ckpt = load_checkpoint(ckpt_path)
    if ckpt.stats is None:
        raise CheckpointError(f"{ckpt_path}: checkpoint carries no normalization stats")
    run_dir = _make_run_dir(config, "predict")
    cleaned, _, _ = _load_cleaned(config)
    by_date = {r.date: r for r in cleaned}

    out = os.path.join(run_dir, "predictions.csv")
    n_days = 0
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("date,hour,y_init,e_star,y_refine,actual\n")
        date = start
        while date <= end:
            if date not in by_date:
                raise DataError(f"no record for requested prediction day {date}")
            fm, target = build_feature_matrix(date, by_date, ckpt.stats)
            pred = predict_day(fm, ckpt.params, ckpt.stats)
            for h in range(HOURS):
                fh.write(f"{date.isoformat()},{h + 1},{float(pred.y_init_norm[h])!r},"
                         f"{float(pred.e_star_norm[h])!r},{float(pred.y_refine_norm[h])!r},"
                         f"{float(target[h])!r}\n")
            n_days += 1
            date += dt.timedelta(days=1)
    print(f"wrote {n_days} day(s) x {HOURS} rows to {out}")
    return 0


def _read_predictions(path: str) -> tuple[list[dt.date], np.ndarray, np.ndarray]:
    by_date: dict[dt.date, dict[int, tuple[float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = {"date", "hour", "y_init", "y_refine"}
        if not needed.issubset(reader.fieldnames or ()):
            raise DataError(f"{path}: predictions CSV must have columns {sorted(needed)}")
        for row in reader:
            date = dt.date.fromisoformat(row["date"])
            by_date.setdefault(date, {})[int(row["hour"])] = (
                float(row["y_init"]), float(row["y_refine"]))
    dates = sorted(by_date)
    for date in dates:
        if sorted(by_date[date]) != list(range(1, HOURS + 1)):
            raise DataError(f"{path}: {date} does not have all {HOURS} hours")
    init = np.array([[by_date[d][h][0] for h in range(1, HOURS + 1)] for d in dates])
    refine = np.array([[by_date[d][h][1] for h in range(1, HOURS + 1)] for d in dates])
    return dates, init, refine


def cmd_evaluate(config: RunConfig, predictions_path: str, truths_path: str) -> int:
    for label, path in (("predictions", predictions_path), ("truths", truths_path)):
        if not os.path.exists(path):
            raise ConfigError(f"{label}: path does not exist: {path}")
    stats_path = config.get("stats")
    ckpt_path = config.get("checkpoint")
    if stats_path:
        stats = NormStats.load_json(stats_path)
    elif ckpt_path:
        stats = load_checkpoint(ckpt_path).stats
    else:
        raise ConfigError("evaluate needs --stats=<norm_stats.json> or --checkpoint=<file>")

    dates, init_n, refine_n = _read_predictions(predictions_path)
    records, _ = load_csv(truths_path, config.schema(), config.require("unit"))
    by_date = {r.date: r for r in records}
    missing = [d for d in dates if d not in by_date]
    if missing:
        raise DataError(f"truths file lacks day(s) {missing}")

    truths = np.stack([by_date[d].loads for d in dates])
    init = stats.denormalize("target", init_n)
    refine = stats.denormalize("target", refine_n)
    rest = {d: by_date[d].is_rest_day for d in dates}

    run_dir = _make_run_dir(config, "evaluate")
    timing = None
    if ckpt_path and config.require("timing_calls") > 0:
        ckpt = load_checkpoint(ckpt_path)
        try:
            fm, _ = build_feature_matrix(dates[0], by_date, stats)
        except MissingHistoryError:
            print("note: truths file has no history before the first prediction day; "
                  "timing skipped")
        else:
            timing = measure_predict_time(fm, ckpt.params, stats,
                                          config.require("timing_calls"))
    report = evaluate_series(dates, refine, truths, rest, timing_ms=timing)
    report.to_csv(os.path.join(run_dir, "eval_report.csv"))
    with open(os.path.join(run_dir, "eval_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text() + "\n")
    for label, series in (("init", init), ("refine", refine)):
        analysis = residual_analysis(series, truths)
        analysis.scatter_csv(os.path.join(run_dir, f"residuals_{label}.csv"))
        state = ("skipped" if analysis.passed is None
                 else "pass" if analysis.passed else "fail")
        print(f"residuals ({label}): {analysis.n_outliers} point(s) beyond two sigma "
              f"of {series.size} ({state}, threshold {analysis.threshold:.1f})")
    print(report.to_text())
    return 0


def cmd_ablate(config: RunConfig) -> int:
    config.require_path("dataset")
    model_cfg = config.model_config()
    sched1, sched2 = config.schedule(1), config.schedule(2)
    seeds = config.require("ablate.seeds")
    test_start, test_end = config.test_window()
    jobs = config.require("jobs")

    run_dir = _make_run_dir(config, "ablate")
    cleaned, _, _ = _load_cleaned(config)
    split = split_train_test(cleaned, test_start, test_end)
    report = run_ablation(split, model_cfg, (sched1, sched2), seeds, jobs=jobs)
    report.to_csv(os.path.join(run_dir, "ablation.csv"))
    text = report.to_text()
    with open(os.path.join(run_dir, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    print(text)
    return 0


# -- argument plumbing ------------------------------------------------------------


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="loadcast", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="store_true",
                        help="print build metadata and exit")
    sub = parser.add_subparsers(dest="command")
    for name, doc in (("synth", "write a deterministic synthetic dataset CSV"),
                      ("preprocess", "clean a dataset and write the cleaned CSV"),
                      ("train", "run the two training stages"),
                      ("predict", "write day-ahead predictions for a date range"),
                      ("evaluate", "score a predictions file against actuals"),
                      ("ablate", "train and compare the three ablation arms")):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", help="path to the key-value config file")
        if name == "train":
            p.add_argument("--stage", choices=("both", "1", "2"), default="both")
        if name == "evaluate":
            p.add_argument("--predictions", required=True)
            p.add_argument("--truths", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.version:
            print(f"loadcast {__version__} (python {sys.version.split()[0]}, "
                  f"numpy {np.__version__})")
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("error: a command is required", file=sys.stderr)
            return 1
        config = RunConfig.parse(getattr(args, "config", None), extra)
        started = time.perf_counter()
        if args.command == "synth":
            code = cmd_synth(config)
        elif args.command == "preprocess":
            code = cmd_preprocess(config)
        elif args.command == "train":
            code = cmd_train(config, args.stage)
        elif args.command == "predict":
            code = cmd_predict(config)
        elif args.command == "evaluate":
            code = cmd_evaluate(config, args.predictions, args.truths)
        else:
            code = cmd_ablate(config)
        print(f"done in {time.perf_counter() - started:.1f}s")
        return code
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, ContractError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except LoadcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
