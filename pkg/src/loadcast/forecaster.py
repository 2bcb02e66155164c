"""Estimator-style facade over the full forecasting pipeline."""

from __future__ import annotations

import datetime as dt
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import (DailyRecord, build_dataset, build_feature_matrix, clean_records)
from .errors import DataError, MissingHistoryError
from .evaluation import daily_accuracy
from .model import DayPrediction, ModelConfig, predict_day
from .training import StageSchedule, train_stage1, train_stage2


class LoadForecaster(BaseEstimator, RegressorMixin):
    """Day-ahead 24-point load forecaster with the usual estimator API.

    ``fit`` consumes a list of :class:`DailyRecord` (the targets live
    inside the records, so ``y`` is never passed), cleans anomalous days,
    fits normalization statistics, and runs the two training stages.
    ``predict`` returns a ``(n_days, 24)`` array of loads in data units.

    Parameters mirror the architecture and schedule knobs; see
    :class:`ModelConfig` and :class:`StageSchedule` for their meaning.
    Set ``refinement=False`` to stop after the initial prediction network.
    """

    def __init__(self, conv_channels=(16, 32, 32, 64, 64, 64, 64), d_model=64,
                 n_heads=4, n_encoder_layers=2, n_decoder_layers=2, ffn_hidden=128,
                 head_hidden=128, gru_hidden=32, refine_hidden=64, dropout=0.0,
                 sigma_threshold=140.0, clean=True, refinement=True,
                 stage1_epochs=500, stage1_batch_size=32, stage1_lr=0.001,
                 stage1_milestones=(150, 300), stage2_epochs=300, stage2_batch_size=16,
                 stage2_lr=0.01, stage2_milestones=(100, 200), seed=0):
        self.conv_channels = conv_channels
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_encoder_layers = n_encoder_layers
        self.n_decoder_layers = n_decoder_layers
        self.ffn_hidden = ffn_hidden
        self.head_hidden = head_hidden
        self.gru_hidden = gru_hidden
        self.refine_hidden = refine_hidden
        self.dropout = dropout
        self.sigma_threshold = sigma_threshold
        self.clean = clean
        self.refinement = refinement
        self.stage1_epochs = stage1_epochs
        self.stage1_batch_size = stage1_batch_size
        self.stage1_lr = stage1_lr
        self.stage1_milestones = stage1_milestones
        self.stage2_epochs = stage2_epochs
        self.stage2_batch_size = stage2_batch_size
        self.stage2_lr = stage2_lr
        self.stage2_milestones = stage2_milestones
        self.seed = seed

    # -- configuration ----------------------------------------------------

    def model_config(self) -> ModelConfig:
        cfg = ModelConfig(
            conv_channels=tuple(self.conv_channels), d_model=self.d_model,
            n_heads=self.n_heads, n_encoder_layers=self.n_encoder_layers,
            n_decoder_layers=self.n_decoder_layers, ffn_hidden=self.ffn_hidden,
            head_hidden=self.head_hidden, gru_hidden=self.gru_hidden,
            refine_hidden=self.refine_hidden, dropout=self.dropout)
        cfg.validate()
        return cfg

    def schedules(self) -> tuple[StageSchedule, StageSchedule]:
        s1 = StageSchedule(1, self.stage1_batch_size, self.stage1_lr,
                           tuple(self.stage1_milestones), self.stage1_epochs)
        s2 = StageSchedule(2, self.stage2_batch_size, self.stage2_lr,
                           tuple(self.stage2_milestones), self.stage2_epochs)
        s1.validate()
        s2.validate()
        return s1, s2

    @staticmethod
    def _validate_records(records: Sequence[DailyRecord]) -> list[DailyRecord]:
        records = list(records)
        if not records:
            raise DataError("no records given")
        for rec in records:
            if not isinstance(rec, DailyRecord):
                raise DataError(f"expected DailyRecord, got {type(rec).__name__}")
        if len({r.date for r in records}) != len(records):
            raise DataError("duplicate dates in records")
        return sorted(records, key=lambda r: r.date)

    # -- estimator API ------------------------------------------------------

    def fit(self, records: Sequence[DailyRecord], y=None) -> "LoadForecaster":
        """Clean, normalize, and train on the given history."""
        records = self._validate_records(records)
        if self.clean:
            records, self.cleaning_log_ = clean_records(records, self.sigma_threshold)
        cfg = self.model_config()
        sched1, sched2 = self.schedules()
        split = build_dataset(records)
        report1, ckpt = train_stage1(split, cfg, sched1, self.seed)
        reports = [report1]
        if self.refinement:
            report2, ckpt = train_stage2(split, ckpt, sched2, self.seed)
            reports.append(report2)
        self.params_ = ckpt.params
        self.stats_ = split.stats
        self.checkpoint_ = ckpt
        self.train_reports_ = reports
        self.history_ = {r.date: r for r in records}
        return self

    def predict_detail(self, records: Sequence[DailyRecord] | None = None,
                       dates: Sequence[dt.date] | None = None) -> list[DayPrediction]:
        """Full predictions (initial, correction, refined) per day.

        ``records`` supply the context (calendar, temperature, and prior
        same-type loads); they default to the fitted history.  ``dates``
        select the target days; by default every day with enough history
        is predicted, while explicitly requested dates raise when history
        is missing.
        """
        check_is_fitted(self, ["params_", "stats_"])
        if records is None:
            by_date = self.history_
        else:
            records = self._validate_records(records)
            if self.clean:
                records, _ = clean_records(records, self.sigma_threshold)
            by_date = {r.date: r for r in records}
        explicit = dates is not None
        if dates is None:
            dates = sorted(by_date)
        out = []
        for date in dates:
            try:
                fm, _ = build_feature_matrix(date, by_date, self.stats_)
            except MissingHistoryError:
                if explicit:
                    raise
                continue
            out.append(predict_day(fm, self.params_, self.stats_))
        return out

    def predict(self, records: Sequence[DailyRecord] | None = None,
                dates: Sequence[dt.date] | None = None) -> np.ndarray:
        """Refined day-ahead loads, shape ``(n_days, 24)``, in data units."""
        details = self.predict_detail(records, dates)
        if not details:
            raise DataError("no predictable days (not enough same-type history)")
        return np.stack([p.y_refine for p in details])

    def score(self, records: Sequence[DailyRecord] | None = None, y=None,
              dates: Sequence[dt.date] | None = None) -> float:
        """Mean daily accuracy (percent) against the actuals in ``records``."""
        details = self.predict_detail(records, dates)
        if not details:
            raise DataError("no predictable days to score")
        by_date = (self.history_ if records is None
                   else {r.date: r for r in self._validate_records(records)})
        scores = [daily_accuracy(p.y_refine, by_date[p.target_date].loads)
                  for p in details]
        return float(np.mean(scores))
