"""Data pipeline: CSV ingest, anomaly cleaning, normalization, and the
assembly of the 9x24 feature matrices with their 24-point day-ahead targets.

The feature matrix layout (one column per hour):

====  =========================================================
row   contents
====  =========================================================
1     month one-hot (12 slots, columns 13-24 zero)
2-3   day-of-month one-hot (31 slots spread over two rows)
4     weekday one-hot (7 slots)
5     rest-day flag broadcast across all 24 columns
6     hour ramp (1..24)/24
7     target-day temperature, min-max normalized
8     most recent same-type day's loads, normalized
9     second most recent same-type day's loads, normalized
====  =========================================================

Rest days are weekends and holidays; similar-day lookups stay within the
day type of the target day.  All normalization statistics come from the
training split only.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (DataError, IngestError, MissingHistoryError,
                     UnrecoverableDayError)

HOURS = 24
FEATURE_ROWS = 9

CSV_COLUMNS = ("date", "hour", "load", "temp", "humidity", "rainfall", "holiday")
_TRUTHY = {"1", "true", "yes", "y"}
_FALSY = {"0", "false", "no", "n", ""}


@dataclass
class DailyRecord:
    """One calendar day: 24 hourly loads plus weather and calendar attributes."""

    date: dt.date
    loads: np.ndarray
    temps: np.ndarray
    humidity: float | None = None
    rainfall: float | None = None
    is_holiday: bool = False
    replaced: np.ndarray = field(default_factory=lambda: np.zeros(HOURS, dtype=bool))

    def __post_init__(self) -> None:
        self.loads = np.asarray(self.loads, dtype=np.float64)
        self.temps = np.asarray(self.temps, dtype=np.float64)
        self.replaced = np.asarray(self.replaced, dtype=bool)
        if self.loads.shape != (HOURS,):
            raise DataError(f"{self.date}: expected {HOURS} loads, got {self.loads.shape}")
        if self.temps.shape != (HOURS,):
            raise DataError(f"{self.date}: expected {HOURS} temps, got {self.temps.shape}")

    @property
    def is_rest_day(self) -> bool:
        return self.date.weekday() >= 5 or self.is_holiday


# -- ingest ---------------------------------------------------------------


@dataclass
class IngestReport:
    path: str
    unit: str
    n_days: int = 0
    gaps: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"{self.path}: {self.n_days} day(s), unit={self.unit}"]
        lines += [f"gap: {g}" for g in self.gaps]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def _parse_bool(raw: str, line: int, problems: list[str]) -> bool:
    v = raw.strip().lower()
    if v in _TRUTHY:
        return True
    if v in _FALSY:
        return False
    problems.append(f"line {line}: unparseable holiday flag {raw!r}")
    return False


def _parse_float(raw: str, line: int, col: str, problems: list[str]) -> float:
    try:
        return float(raw)
    except ValueError:
        problems.append(f"line {line}: unparseable {col} value {raw!r}")
        return math.nan


def load_csv(path: str, schema: dict[str, str] | None = None,
             unit: str = "kW") -> tuple[list[DailyRecord], IngestReport]:
    """Read an hourly (or wide daily) load CSV into daily records.

    Hourly layout: header ``date,hour,load[,temp,humidity,rainfall,holiday]``
    with hour in 1..24 and exactly 24 rows per date.  Wide layout: one row
    per date with ``load1..load24`` columns (plus optional ``temp1..temp24``
    or ``temp_avg``, ``humidity``, ``rainfall``, ``holiday``).  ``schema``
    renames logical hourly-layout columns to actual header names.

    Records come back sorted by date.  Date gaps are reported, never
    silently filled; structural problems raise :class:`IngestError` with an
    itemized, line-numbered list.
    """
    if unit not in ("kW", "MW"):
        raise DataError(f"unit must be kW or MW, got {unit!r}")
    colmap = dict(schema or {})
    names = {logical: colmap.get(logical, logical) for logical in CSV_COLUMNS}

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError([f"{path}: empty file"]) from None
        header = [h.strip() for h in header]
        rows = [([c.strip() for c in row], i + 2) for i, row in enumerate(reader) if row]

    report = IngestReport(path=str(path), unit=unit)
    if names["hour"] in header:
        records, problems = _read_hourly(header, rows, names, report)
    elif "load1" in header:
        records, problems = _read_wide(header, rows, report)
    else:
        raise IngestError([f"header {header!r} has neither an "
                           f"{names['hour']!r} column nor load1..load24 columns"])
    if problems:
        raise IngestError(problems)

    records.sort(key=lambda r: r.date)
    for prev, cur in zip(records, records[1:]):
        missing = (cur.date - prev.date).days - 1
        if missing > 0:
            report.gaps.append(f"{missing} day(s) missing between {prev.date} and {cur.date}")
    report.n_days = len(records)
    return records, report


def _read_hourly(header, rows, names, report) -> tuple[list[DailyRecord], list[str]]:
    problems: list[str] = []
    idx = {}
    for logical, actual in names.items():
        idx[logical] = header.index(actual) if actual in header else None
    for required in ("date", "hour", "load"):
        if idx[required] is None:
            return [], [f"missing required column {names[required]!r}"]
    if idx["temp"] is None:
        report.notes.append("no temperature column; temperatures default to 0")

    by_date: dict[dt.date, dict[int, tuple]] = {}
    meta: dict[dt.date, dict] = {}
    for row, line in rows:
        def cell(logical):
            i = idx[logical]
            return row[i] if i is not None and i < len(row) else ""

        try:
            date = dt.date.fromisoformat(cell("date"))
        except ValueError:
            problems.append(f"line {line}: unparseable date {cell('date')!r}")
            continue
        try:
            hour = int(cell("hour"))
        except ValueError:
            problems.append(f"line {line}: unparseable hour {cell('hour')!r}")
            continue
        if not 1 <= hour <= HOURS:
            problems.append(f"line {line}: hour {hour} outside 1..{HOURS}")
            continue
        load = _parse_float(cell("load"), line, "load", problems)
        temp = (_parse_float(cell("temp"), line, "temp", problems)
                if idx["temp"] is not None and cell("temp") != "" else 0.0)
        hours = by_date.setdefault(date, {})
        if hour in hours:
            problems.append(f"line {line}: duplicate entry for {date} hour {hour}")
            continue
        rep_cell = ""
        if "replaced" in header:
            j = header.index("replaced")
            rep_cell = row[j] if j < len(row) else ""
        hours[hour] = (load, temp, rep_cell.strip().lower() in _TRUTHY)
        info = meta.setdefault(date, {"humidity": None, "rainfall": None, "holiday": False})
        if idx["humidity"] is not None and cell("humidity") != "":
            info["humidity"] = _parse_float(cell("humidity"), line, "humidity", problems)
        if idx["rainfall"] is not None and cell("rainfall") != "":
            info["rainfall"] = _parse_float(cell("rainfall"), line, "rainfall", problems)
        if idx["holiday"] is not None and cell("holiday") != "":
            info["holiday"] = info["holiday"] or _parse_bool(cell("holiday"), line, problems)

    records = []
    for date in sorted(by_date):
        hours = by_date[date]
        missing = sorted(set(range(1, HOURS + 1)) - set(hours))
        if missing:
            problems.append(f"{date}: missing hour(s) {missing}")
            continue
        loads = np.array([hours[h][0] for h in range(1, HOURS + 1)])
        temps = np.array([hours[h][1] for h in range(1, HOURS + 1)])
        flags = np.array([hours[h][2] for h in range(1, HOURS + 1)], dtype=bool)
        info = meta[date]
        records.append(DailyRecord(date, loads, temps, info["humidity"],
                                   info["rainfall"], info["holiday"], flags))
    return records, problems


def _read_wide(header, rows, report) -> tuple[list[DailyRecord], list[str]]:
    problems: list[str] = []
    load_cols = [f"load{h}" for h in range(1, HOURS + 1)]
    missing_cols = [c for c in load_cols if c not in header]
    if missing_cols:
        return [], [f"wide layout missing column(s) {missing_cols}"]
    temp_cols = [f"temp{h}" for h in range(1, HOURS + 1)]
    have_hourly_temp = all(c in header for c in temp_cols)
    if not have_hourly_temp and "temp_avg" not in header:
        report.notes.append("no temperature columns; temperatures default to 0")

    col = {name: header.index(name) for name in header}
    seen: set[dt.date] = set()
    records = []
    for row, line in rows:
        def cell(name):
            i = col.get(name)
            return row[i] if i is not None and i < len(row) else ""

        try:
            date = dt.date.fromisoformat(cell("date"))
        except ValueError:
            problems.append(f"line {line}: unparseable date {cell('date')!r}")
            continue
        if date in seen:
            problems.append(f"line {line}: duplicate date {date}")
            continue
        seen.add(date)
        loads = np.array([_parse_float(cell(c), line, c, problems) for c in load_cols])
        if have_hourly_temp:
            temps = np.array([_parse_float(cell(c), line, c, problems) for c in temp_cols])
        elif "temp_avg" in header and cell("temp_avg") != "":
            temps = np.full(HOURS, _parse_float(cell("temp_avg"), line, "temp_avg", problems))
        else:
            temps = np.zeros(HOURS)
        humidity = (_parse_float(cell("humidity"), line, "humidity", problems)
                    if cell("humidity") != "" else None)
        rainfall = (_parse_float(cell("rainfall"), line, "rainfall", problems)
                    if cell("rainfall") != "" else None)
        holiday = _parse_bool(cell("holiday"), line, problems) if cell("holiday") != "" else False
        if not np.isnan(loads).any():
            records.append(DailyRecord(date, loads, temps, humidity, rainfall, holiday))
    return records, problems


def save_csv(records: Sequence[DailyRecord], path: str) -> None:
    """Write records in the hourly layout plus a ``replaced`` flag column.

    Floats are written with round-trip precision, so reading the file back
    reproduces the records exactly.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(CSV_COLUMNS) + ["replaced"])
        for rec in records:
            for h in range(HOURS):
                writer.writerow([
                    rec.date.isoformat(), h + 1,
                    repr(float(rec.loads[h])), repr(float(rec.temps[h])),
                    "" if rec.humidity is None else repr(float(rec.humidity)),
                    "" if rec.rainfall is None else repr(float(rec.rainfall)),
                    int(rec.is_holiday), int(bool(rec.replaced[h])),
                ])


# -- anomaly cleaning -------------------------------------------------------


class AnomalyCheck(NamedTuple):
    anomalous: bool
    sigma: float
    mu: float


class Replacement(NamedTuple):
    hour: int  # 1-based
    old: float
    new: float


def detect_anomalous_day(rec: DailyRecord, threshold: float = 140.0) -> AnomalyCheck:
    """Flag a day whose loads are too dispersed to be trusted.

    Uses the population standard deviation of the 24 loads; the day is
    anomalous when it exceeds ``threshold`` (a kW-scale default, override
    for MW data).
    """
    mu = float(np.mean(rec.loads))
    sigma = float(np.sqrt(np.mean((rec.loads - mu) ** 2)))
    return AnomalyCheck(sigma > threshold, sigma, mu)


def locate_and_replace_outliers(rec: DailyRecord, threshold: float = 140.0
                                ) -> tuple[DailyRecord, list[Replacement]]:
    """Replace outlier hours of an anomalous day with neighbor means.

    A point is an outlier when it sits more than one standard deviation
    from the day mean (|x - mu| / sigma > 1).  Each outlier becomes the
    mean of its nearest non-flagged left and right neighbors (a single
    neighbor at the boundaries).  Days that do not exceed ``threshold``
    are returned unchanged, which makes cleaning idempotent.
    """
    check = detect_anomalous_day(rec, threshold)
    if not check.anomalous:
        return rec, []
    m = np.abs(rec.loads - check.mu) / check.sigma
    return _replace_flagged(rec, m > 1.0)


def _replace_flagged(rec: DailyRecord, flagged: np.ndarray
                     ) -> tuple[DailyRecord, list[Replacement]]:
    if flagged.all():
        raise UnrecoverableDayError(f"{rec.date}: all 24 points flagged as outliers")
    loads = rec.loads.copy()
    replacements = []
    for i in np.nonzero(flagged)[0]:
        left = next((j for j in range(i - 1, -1, -1) if not flagged[j]), None)
        right = next((j for j in range(i + 1, HOURS) if not flagged[j]), None)
        neighbors = [rec.loads[j] for j in (left, right) if j is not None]
        new = float(np.mean(neighbors))
        replacements.append(Replacement(int(i) + 1, float(rec.loads[i]), new))
        loads[i] = new
    cleaned = replace(rec, loads=loads, replaced=rec.replaced | flagged)
    return cleaned, replacements


@dataclass
class CleaningLog:
    threshold: float
    entries: list[tuple[dt.date, float, float, list[Replacement]]] = field(default_factory=list)
    dropped: list[dt.date] = field(default_factory=list)

    @property
    def n_replacements(self) -> int:
        return sum(len(reps) for _, _, _, reps in self.entries)

    def summary(self) -> str:
        lines = [f"threshold sigma* = {self.threshold}: "
                 f"{len(self.entries)} day(s) cleaned, {self.n_replacements} point(s) replaced"]
        for date, before, after, reps in self.entries:
            where = ", ".join(f"h{r.hour} {r.old:g}->{r.new:g}" for r in reps)
            lines.append(f"{date}: sigma {before:.2f} -> {after:.2f} ({where})")
        for date in self.dropped:
            lines.append(f"{date}: dropped (unrecoverable)")
        return "\n".join(lines)


def clean_records(records: Sequence[DailyRecord], threshold: float = 140.0
                  ) -> tuple[list[DailyRecord], CleaningLog]:
    """Run detection and replacement over all records; drop unrecoverable days."""
    log = CleaningLog(threshold=threshold)
    out = []
    for rec in records:
        check = detect_anomalous_day(rec, threshold)
        if not check.anomalous:
            out.append(rec)
            continue
        try:
            cleaned, reps = locate_and_replace_outliers(rec, threshold)
        except UnrecoverableDayError:
            log.dropped.append(rec.date)
            continue
        after = detect_anomalous_day(cleaned, threshold).sigma
        log.entries.append((rec.date, check.sigma, after, reps))
        out.append(cleaned)
    return out, log


# -- normalization ----------------------------------------------------------


def minmax_normalize(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map ``x`` onto [0, 1] via ``(x - lo) / (hi - lo)``.

    Values outside the fitted range land outside [0, 1] and are not
    clipped.  A degenerate range maps everything to 0.5 with a warning.
    """
    x = np.asarray(x, dtype=np.float64)
    if hi < lo:
        raise DataError(f"normalization range inverted: [{lo}, {hi}]")
    if hi == lo:
        warnings.warn("degenerate normalization range; mapping to 0.5", stacklevel=2)
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def denormalize(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Inverse of :func:`minmax_normalize` (identity for degenerate ranges)."""
    x = np.asarray(x, dtype=np.float64)
    if hi == lo:
        return np.full_like(x, lo)
    return x * (hi - lo) + lo


class NormStats:
    """Named min/max pairs fitted on the training split.

    Keys used by the pipeline: ``temp``, ``prev1``, ``prev2`` for feature
    rows 7-9 and ``target`` for the 24-point label vector.
    """

    def __init__(self, ranges: dict[str, tuple[float, float]]):
        self.ranges = {k: (float(lo), float(hi)) for k, (lo, hi) in ranges.items()}
        for k, (lo, hi) in self.ranges.items():
            if hi < lo:
                raise DataError(f"stats entry {k!r} has inverted range [{lo}, {hi}]")

    def normalize(self, key: str, x: np.ndarray) -> np.ndarray:
        lo, hi = self.ranges[key]
        return minmax_normalize(x, lo, hi)

    def denormalize(self, key: str, x: np.ndarray) -> np.ndarray:
        lo, hi = self.ranges[key]
        return denormalize(x, lo, hi)

    def to_dict(self) -> dict:
        return {k: [lo, hi] for k, (lo, hi) in sorted(self.ranges.items())}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls({k: (v[0], v[1]) for k, v in d.items()})

    def save_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load_json(cls, path: str) -> "NormStats":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def __eq__(self, other) -> bool:
        return isinstance(other, NormStats) and self.ranges == other.ranges


# -- feature construction -----------------------------------------------------


@dataclass
class FeatureMatrix:
    """The 9x24 normalized model input for one target day."""

    values: np.ndarray
    target_date: dt.date

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (FEATURE_ROWS, HOURS):
            raise DataError(f"feature matrix must be {FEATURE_ROWS}x{HOURS}, "
                            f"got {self.values.shape}")

    @property
    def is_rest_day(self) -> bool:
        return bool(self.values[4, 0] == 1.0)


def validate_feature_matrix(fm: FeatureMatrix) -> None:
    """Check the structural invariants of a feature matrix; raise DataError."""
    v = fm.values
    if not np.isfinite(v).all():
        raise DataError(f"{fm.target_date}: feature matrix contains non-finite values")
    if v[0].sum() != 1.0 or v[0, 12:].any():
        raise DataError(f"{fm.target_date}: month row is not a 12-slot one-hot")
    band = np.concatenate([v[1], v[2]])
    if band.sum() != 1.0 or band[31:].any():
        raise DataError(f"{fm.target_date}: day-of-month band is not a 31-slot one-hot")
    if v[3].sum() != 1.0 or v[3, 7:].any():
        raise DataError(f"{fm.target_date}: weekday row is not a 7-slot one-hot")
    if not (np.all(v[4] == 0.0) or np.all(v[4] == 1.0)):
        raise DataError(f"{fm.target_date}: rest-day row must be constant 0 or 1")
    if not np.array_equal(v[5], np.arange(1, HOURS + 1) / HOURS):
        raise DataError(f"{fm.target_date}: hour row is not the (1..24)/24 ramp")


def similar_days(target_date: dt.date, by_date: dict[dt.date, DailyRecord],
                 count: int = 2, max_lookback: int = 60) -> list[DailyRecord]:
    """The most recent prior days of the same type (workday or rest day)."""
    if target_date not in by_date:
        raise MissingHistoryError(f"no record for target date {target_date}")
    want_rest = by_date[target_date].is_rest_day
    found = []
    probe = target_date
    for _ in range(max_lookback):
        probe = probe - dt.timedelta(days=1)
        rec = by_date.get(probe)
        if rec is not None and rec.is_rest_day == want_rest:
            found.append(rec)
            if len(found) == count:
                return found
    raise MissingHistoryError(
        f"{target_date}: only {len(found)} prior "
        f"{'rest' if want_rest else 'work'} day(s) within {max_lookback} days")


def _raw_feature_rows(target_date: dt.date, by_date: dict[dt.date, DailyRecord]
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows with rows 7-9 still in raw units, plus the raw target."""
    rec = by_date[target_date]
    prev1, prev2 = similar_days(target_date, by_date, count=2)
    v = np.zeros((FEATURE_ROWS, HOURS))
    v[0, rec.date.month - 1] = 1.0
    day = rec.date.day
    if day <= HOURS:
        v[1, day - 1] = 1.0
    else:
        v[2, day - HOURS - 1] = 1.0
    v[3, rec.date.weekday()] = 1.0
    v[4, :] = 1.0 if rec.is_rest_day else 0.0
    v[5, :] = np.arange(1, HOURS + 1) / HOURS
    v[6, :] = rec.temps
    v[7, :] = prev1.loads
    v[8, :] = prev2.loads
    return v, rec.loads.copy()


def fit_norm_stats(raw_rows: Sequence[np.ndarray], raw_targets: Sequence[np.ndarray]
                   ) -> NormStats:
    """Min/max per normalized feature row (and the target) over the train split."""
    rows = np.stack(raw_rows)
    targets = np.stack(raw_targets)
    return NormStats({
        "temp": (rows[:, 6, :].min(), rows[:, 6, :].max()),
        "prev1": (rows[:, 7, :].min(), rows[:, 7, :].max()),
        "prev2": (rows[:, 8, :].min(), rows[:, 8, :].max()),
        "target": (targets.min(), targets.max()),
    })


def _apply_stats(raw: np.ndarray, stats: NormStats) -> np.ndarray:
    v = raw.copy()
    v[6, :] = stats.normalize("temp", v[6, :])
    v[7, :] = stats.normalize("prev1", v[7, :])
    v[8, :] = stats.normalize("prev2", v[8, :])
    return v


def build_feature_matrix(target_date: dt.date, by_date: dict[dt.date, DailyRecord],
                         stats: NormStats) -> tuple[FeatureMatrix, np.ndarray]:
    """Assemble the normalized feature matrix and target for one day.

    Needs the two most recent prior same-type days; raises
    :class:`MissingHistoryError` near the start of a dataset.
    """
    raw, target_raw = _raw_feature_rows(target_date, by_date)
    fm = FeatureMatrix(_apply_stats(raw, stats), target_date)
    return fm, stats.normalize("target", target_raw)


# -- splits ----------------------------------------------------------------


@dataclass
class DatasetSplit:
    """Chronological train/test feature sets sharing train-only statistics."""

    train: list[tuple[FeatureMatrix, np.ndarray]]
    test: list[tuple[FeatureMatrix, np.ndarray]]
    stats: NormStats
    skipped: list[dt.date] = field(default_factory=list)
    rest_days: dict[dt.date, bool] = field(default_factory=dict)

    @property
    def train_dates(self) -> list[dt.date]:
        return [fm.target_date for fm, _ in self.train]

    @property
    def test_dates(self) -> list[dt.date]:
        return [fm.target_date for fm, _ in self.test]


def build_dataset(records: Sequence[DailyRecord],
                  test_start: dt.date | None = None,
                  test_end: dt.date | None = None) -> DatasetSplit:
    """Build feature matrices for all days, split chronologically.

    With no test window everything is training data.  Statistics are
    fitted on training days only and applied to both splits.  Days without
    enough same-type history are skipped (dataset warmup).
    """
    if not records:
        raise DataError("no records to build a dataset from")
    by_date = {r.date: r for r in records}
    if len(by_date) != len(records):
        raise DataError("duplicate dates in records")
    dates = sorted(by_date)

    if (test_start is None) != (test_end is None):
        raise DataError("test_start and test_end must be given together")
    if test_start is not None:
        if test_end < test_start:
            raise DataError(f"test window inverted: {test_start}..{test_end}")
        if test_start <= dates[0]:
            raise DataError(f"test window must start after the first record {dates[0]}")
        if dates[-1] > test_end:
            raise DataError(f"records extend past the test window "
                            f"({dates[-1]} > {test_end}); test days must be the "
                            f"latest days in the dataset")
        missing = [d for d in _date_range(test_start, test_end) if d not in by_date]
        if missing:
            raise DataError(f"test window has no record for {missing}")

    train_dates = [d for d in dates if test_start is None or d < test_start]
    test_dates = [] if test_start is None else list(_date_range(test_start, test_end))
    if not train_dates:
        raise DataError("empty training window")

    skipped: list[dt.date] = []
    train_raw: list[tuple[dt.date, np.ndarray, np.ndarray]] = []
    for d in train_dates:
        try:
            raw, target = _raw_feature_rows(d, by_date)
        except MissingHistoryError:
            skipped.append(d)
            continue
        train_raw.append((d, raw, target))
    if not train_raw:
        raise DataError("no training day has enough same-type history")

    stats = fit_norm_stats([r for _, r, _ in train_raw], [t for _, _, t in train_raw])
    train = [(FeatureMatrix(_apply_stats(raw, stats), d), stats.normalize("target", t))
             for d, raw, t in train_raw]
    test = [build_feature_matrix(d, by_date, stats) for d in test_dates]
    rest = {d: by_date[d].is_rest_day for d in by_date}
    return DatasetSplit(train=train, test=test, stats=stats,
                        skipped=skipped, rest_days=rest)


def split_train_test(records: Sequence[DailyRecord], test_start: dt.date,
                     test_end: dt.date) -> DatasetSplit:
    """Chronological split with a mandatory test window at the end."""
    if test_start is None or test_end is None:
        raise DataError("split_train_test needs an explicit test window")
    return build_dataset(records, test_start, test_end)


def _date_range(start: dt.date, end: dt.date) -> Iterable[dt.date]:
    d = start
    while d <= end:
        yield d
        d += dt.timedelta(days=1)


# -- synthetic fixtures ---------------------------------------------------------


@dataclass
class SyntheticProfile:
    """Generator knobs for the deterministic synthetic dataset."""

    base_load: float = 500.0
    daily_amplitude: float = 110.0
    rest_day_drop: float = 70.0
    temp_coupling: float = 4.0
    noise_std: float = 4.0
    temp_base: float = 15.0
    temp_season_amplitude: float = 9.0
    temp_daily_amplitude: float = 4.0
    temp_noise_std: float = 0.8
    start: dt.date = dt.date(2020, 1, 6)  # a Monday

    season_days: int = 364  # 52 whole weeks, so weekday and season phases align

HOLIDAYS_MONTH_DAY = ((1, 1), (5, 1), (10, 1), (12, 25))


def synthesize_dataset(seed: int, n_days: int,
                       profile: SyntheticProfile | None = None) -> list[DailyRecord]:
    """Deterministic synthetic load/weather series for tests and demos.

    Load is a daytime sinusoid on a base level, dropped on rest days,
    coupled to temperature, plus seeded Gaussian noise.  Temperature is a
    seasonal plus intra-day sinusoid.  Holidays sit on a fixed synthetic
    calendar and behave like rest days.
    """
    if n_days < 30:
        raise DataError(f"synthetic dataset needs n_days >= 30, got {n_days}")
    p = profile or SyntheticProfile()
    rng = np.random.default_rng(seed)
    hours = np.arange(1, HOURS + 1)
    records = []
    for i in range(n_days):
        date = p.start + dt.timedelta(days=i)
        is_holiday = (date.month, date.day) in HOLIDAYS_MONTH_DAY
        rest = date.weekday() >= 5 or is_holiday
        phase = 2.0 * np.pi * (i % p.season_days) / p.season_days
        temps = (p.temp_base
                 + p.temp_season_amplitude * np.sin(phase)
                 + p.temp_daily_amplitude * np.sin(2.0 * np.pi * (hours - 9) / HOURS)
                 + rng.normal(0.0, p.temp_noise_std, HOURS))
        loads = (p.base_load
                 + p.daily_amplitude * np.sin(2.0 * np.pi * (hours - 7) / HOURS)
                 - (p.rest_day_drop if rest else 0.0)
                 + p.temp_coupling * (temps - p.temp_base)
                 + rng.normal(0.0, p.noise_std, HOURS))
        records.append(DailyRecord(date, np.maximum(loads, 0.0), temps,
                                   humidity=None, rainfall=None, is_holiday=is_holiday))
    return records
