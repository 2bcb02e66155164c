"""Two-stage training: the initial prediction network first, then the
refinement head against residual targets with stage 1 frozen."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .data import HOURS, DatasetSplit
from .errors import ContractError, DataError, NumericError
from .model import ModelConfig, ModelParams, forward_initial, init_params, refine_load
from .optim import AdamState, adam_step
from .tensor import Tensor, backward


@dataclass
class StageSchedule:
    """Per-stage optimizer schedule; the learning rate halves at each milestone."""

    stage: int
    batch_size: int
    initial_lr: float
    milestones: tuple[int, ...]
    total_epochs: int
    grad_clip: float = 0.0  # 0 disables clipping

    def __post_init__(self) -> None:
        self.milestones = tuple(int(m) for m in self.milestones)

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise DataError(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_size < 1 or self.total_epochs < 1 or self.initial_lr <= 0:
            raise DataError("batch_size/total_epochs must be >= 1 and initial_lr > 0")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise DataError(f"milestones must be strictly increasing: {self.milestones}")
        if any(not 1 <= m < self.total_epochs for m in self.milestones):
            raise DataError(f"milestones must lie in [1, total_epochs): {self.milestones}")


def stage1_defaults() -> StageSchedule:
    return StageSchedule(stage=1, batch_size=32, initial_lr=0.001,
                         milestones=(150, 300), total_epochs=500)


def stage2_defaults() -> StageSchedule:
    return StageSchedule(stage=2, batch_size=16, initial_lr=0.01,
                         milestones=(100, 200), total_epochs=300)


def lr_schedule(epoch: int, schedule: StageSchedule) -> float:
    """Learning rate at ``epoch``: the initial rate halved once per milestone
    already reached."""
    if not 1 <= epoch <= schedule.total_epochs:
        raise DataError(f"epoch {epoch} outside 1..{schedule.total_epochs}")
    halvings = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.initial_lr * 0.5 ** halvings


def mse_day_loss(pred: Tensor, truth: Tensor) -> Tensor:
    """Mean squared error over the 24 points of one day (normalized space)."""
    if pred.shape != truth.shape or pred.shape[-1] != HOURS:
        raise DataError(f"day loss needs matching {HOURS}-point vectors, "
                        f"got {pred.shape} and {truth.shape}")
    diff = pred - truth
    return (diff * diff).mean()


def batch_loss(pred: Tensor, truth: Tensor) -> Tensor:
    """Batch training loss: the mean over the batch of the per-day MSE."""
    if pred.shape != truth.shape:
        raise DataError(f"batch loss shapes differ: {pred.shape} vs {truth.shape}")
    diff = pred - truth
    return (diff * diff).mean(axis=-1).mean()


@dataclass
class TrainReport:
    stage: int
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.losses)


def _epoch_rng(seed: int, stage: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([abs(int(seed)), stage, epoch]))


def _clip_gradients(params: dict[str, Tensor], limit: float) -> None:
    if limit <= 0:
        return
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = total ** 0.5
    if norm > limit:
        scale = limit / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale


def write_loss_csv(path: str, entries: list[tuple[int, int, float, float]]) -> None:
    """Write ``epoch,stage,lr,loss`` rows."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,stage,lr,loss\n")
        for epoch, stage, lr, loss in entries:
            fh.write(f"{epoch},{stage},{lr!r},{loss!r}\n")


def _make_checkpoint(params, stats, seed, epochs, history, adam1, adam2,
                     schedules) -> Checkpoint:
    return Checkpoint(params=params, stats=stats, seed=seed, epochs=dict(epochs),
                      loss_history={k: list(v) for k, v in history.items()},
                      adam1=adam1, adam2=adam2, schedules=schedules)


def _schedule_dict(s: StageSchedule) -> dict:
    return {"stage": s.stage, "batch_size": s.batch_size, "initial_lr": s.initial_lr,
            "milestones": list(s.milestones), "total_epochs": s.total_epochs,
            "grad_clip": s.grad_clip}


def train_stage1(split: DatasetSplit, config: ModelConfig, schedule: StageSchedule,
                 seed: int, resume: Checkpoint | None = None,
                 checkpoint_dir: str | None = None) -> tuple[TrainReport, Checkpoint]:
    """Train the initial prediction network.

    Training days are reshuffled every epoch with a permutation derived
    from (seed, stage, epoch), so an interrupted run resumed from a
    checkpoint retraces the uninterrupted run exactly.  Checkpoints are
    written at each milestone and at the end when ``checkpoint_dir`` is
    given.
    """
    schedule.validate()
    config.validate()
    if not split.train:
        raise DataError("cannot train on an empty training split")

    x_all = np.stack([fm.values for fm, _ in split.train])[:, None, :, :]
    y_all = np.stack([target for _, target in split.train])
    n = len(split.train)

    if resume is not None:
        params = resume.params
        adam = resume.adam1 or AdamState()
        start_epoch = resume.epochs.get("stage1", 0) + 1
        history = {k: list(v) for k, v in resume.loss_history.items()}
        epochs = dict(resume.epochs)
        adam2 = resume.adam2
    else:
        params = init_params(config, seed)
        adam = AdamState()
        start_epoch = 1
        history = {"stage1": [], "stage2": []}
        epochs = {"stage1": 0, "stage2": 0}
        adam2 = None

    stage_params = params.stage_params(1)
    report = TrainReport(stage=1)
    schedules = {"stage1": _schedule_dict(schedule)}
    started = time.perf_counter()

    ckpt = None
    for epoch in range(start_epoch, schedule.total_epochs + 1):
        lr = lr_schedule(epoch, schedule)
        adam.lr = lr
        rng = _epoch_rng(seed, 1, epoch)
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for bi, lo in enumerate(range(0, n, schedule.batch_size)):
            idx = perm[lo:lo + schedule.batch_size]
            for p in stage_params.values():
                p.zero_grad()
            pred = forward_initial(Tensor(x_all[idx]), params, training=True, rng=rng)
            loss = batch_loss(pred, Tensor(y_all[idx]))
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"stage 1: non-finite loss at epoch {epoch}, batch {bi}")
            backward(loss)
            _clip_gradients(stage_params, schedule.grad_clip)
            adam_step(stage_params, None, adam)
            epoch_loss += value * len(idx)
        history["stage1"].append(epoch_loss / n)
        report.losses.append(epoch_loss / n)
        report.lrs.append(lr)
        epochs["stage1"] = epoch
        if checkpoint_dir and (epoch in schedule.milestones or epoch == schedule.total_epochs):
            ckpt = _make_checkpoint(params, split.stats, seed, epochs, history,
                                    adam, adam2, schedules)
            save_checkpoint(ckpt, f"{checkpoint_dir}/stage1-epoch{epoch:04d}.ckpt")

    report.wall_time_s = time.perf_counter() - started
    ckpt = _make_checkpoint(params, split.stats, seed, epochs, history, adam,
                            adam2, schedules)
    return report, ckpt


def predict_initial_all(params: ModelParams, x_all: np.ndarray,
                        chunk: int = 256) -> np.ndarray:
    """Stage-1 predictions for a stack of feature matrices, eval mode."""
    outs = []
    for lo in range(0, len(x_all), chunk):
        outs.append(forward_initial(Tensor(x_all[lo:lo + chunk]), params,
                                    training=False).data)
    return np.concatenate(outs, axis=0)


def train_stage2(split: DatasetSplit, checkpoint: Checkpoint, schedule: StageSchedule,
                 seed: int, resume: bool = False,
                 checkpoint_dir: str | None = None) -> tuple[TrainReport, Checkpoint]:
    """Train the refinement head on residual targets with stage 1 frozen.

    Stage-1 runs once in eval mode to produce the initial forecasts; the
    head learns ``target - initial`` under the same MSE loss.  Any drift
    in stage-1 parameters (checked bit for bit) is a contract violation.
    """
    schedule.validate()
    if not split.train:
        raise DataError("cannot train on an empty training split")
    params = checkpoint.params
    if checkpoint.epochs.get("stage1", 0) < 1:
        raise DataError("stage 2 needs a trained stage-1 checkpoint")

    frozen = params.snapshot_stage1()
    x_all = np.stack([fm.values for fm, _ in split.train])[:, None, :, :]
    fm_all = x_all[:, 0, :, :]
    y_all = np.stack([target for _, target in split.train])
    y_init = predict_initial_all(params, x_all)
    e_target = y_all - y_init
    n = len(split.train)

    stage_params = params.stage_params(2)
    adam = checkpoint.adam2 if (resume and checkpoint.adam2) else AdamState()
    start_epoch = checkpoint.epochs.get("stage2", 0) + 1 if resume else 1
    history = {k: list(v) for k, v in checkpoint.loss_history.items()}
    if not resume:
        history["stage2"] = []
    epochs = dict(checkpoint.epochs)
    schedules = dict(checkpoint.schedules or {})
    schedules["stage2"] = _schedule_dict(schedule)

    report = TrainReport(stage=2)
    started = time.perf_counter()
    for epoch in range(start_epoch, schedule.total_epochs + 1):
        lr = lr_schedule(epoch, schedule)
        adam.lr = lr
        rng = _epoch_rng(seed, 2, epoch)
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for bi, lo in enumerate(range(0, n, schedule.batch_size)):
            idx = perm[lo:lo + schedule.batch_size]
            for p in stage_params.values():
                p.zero_grad()
            e_pred = refine_load(Tensor(fm_all[idx]), Tensor(y_init[idx]), params)
            loss = batch_loss(e_pred, Tensor(e_target[idx]))
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"stage 2: non-finite loss at epoch {epoch}, batch {bi}")
            backward(loss)
            _clip_gradients(stage_params, schedule.grad_clip)
            adam_step(stage_params, None, adam)
            epoch_loss += value * len(idx)
        history["stage2"].append(epoch_loss / n)
        report.losses.append(epoch_loss / n)
        report.lrs.append(lr)
        epochs["stage2"] = epoch
        if checkpoint_dir and (epoch in schedule.milestones or epoch == schedule.total_epochs):
            params.stage2_trained = True
            save_checkpoint(_make_checkpoint(params, split.stats, seed, epochs, history,
                                             checkpoint.adam1, adam, schedules),
                            f"{checkpoint_dir}/stage2-epoch{epoch:04d}.ckpt")

    if params.snapshot_stage1() != frozen:
        raise ContractError("stage-1 parameters changed during stage-2 training")
    params.stage2_trained = True
    report.wall_time_s = time.perf_counter() - started
    ckpt = _make_checkpoint(params, split.stats, seed, epochs, history,
                            checkpoint.adam1, adam, schedules)
    return report, ckpt
