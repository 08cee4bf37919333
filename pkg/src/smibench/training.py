"""Pre-training and fine-tuning loops.

Both phases share the optimizer (AdamW with its stock defaults) and the
linear-warmup cosine-annealing schedule: the learning rate ramps to its
peak over the first epoch and anneals to eta_min by the final step.
Pre-training fits the multi-property regression head with a masked L1
loss; fine-tuning trains only the head on a frozen backbone. Everything
is deterministic given (config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .curation import DescriptorTable, SplitPlan, epoch_permutation
from .metrics import auc_roc, rmse
from .models import FtModel, MtrModel, backbone_checksum, freeze_backbone
from .tokenizer import EncodedBatch


class NumericError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 7
    peak_lr: float = 1e-4
    warmup_epochs: int = 1
    eta_min: float = 0.0
    seed: int = 0
    adamw: AdamWConfig = dc_field(default_factory=AdamWConfig)

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be below "
                             f"epochs ({self.epochs})")
        if not self.peak_lr > self.eta_min >= 0.0:
            raise ValueError(f"need peak_lr > eta_min >= 0, got {self.peak_lr}, {self.eta_min}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class LrSchedule:
    warmup_steps: int
    total_steps: int
    peak: float
    eta_min: float = 0.0


def schedule_for(config: TrainConfig, steps_per_epoch: int) -> LrSchedule:
    return LrSchedule(
        warmup_steps=config.warmup_epochs * steps_per_epoch,
        total_steps=config.epochs * steps_per_epoch,
        peak=config.peak_lr,
        eta_min=config.eta_min,
    )


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a step: linear ramp to the peak over the warmup
    steps (the first step is already nonzero), then cosine annealing from
    the peak down to eta_min at the last step."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.peak * (step + 1) / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    if span == 0:
        return schedule.peak
    progress = (step - schedule.warmup_steps) / span
    return schedule.eta_min + (schedule.peak - schedule.eta_min) * (
        1.0 + math.cos(math.pi * progress)) / 2.0


class AdamW:
    """Decoupled weight decay with bias-corrected first and second moments."""

    def __init__(self, params: list[Parameter], config: AdamWConfig | None = None):
        self.params = [p for p in params if p.trainable]
        self.config = config or AdamWConfig()
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        cfg = self.config
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in parameter {p.name}")
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data *= 1.0 - lr * cfg.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


@dataclass
class EpochCheckpoint:
    """One pre-training epoch: run identity, weights, and validation loss."""

    run_id: dict
    epoch: int
    payload: dict[str, np.ndarray]
    val_loss: float
    path: str | None = None


def _iter_batches(indices: np.ndarray, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start: start + batch_size]


def _mtr_val_loss(model: MtrModel, batch_all: EncodedBatch, table: DescriptorTable,
                  indices: np.ndarray, batch_size: int) -> float:
    total, count = 0.0, 0
    for idx in _iter_batches(indices, batch_size):
        pred = model.forward(batch_all.take(idx)).data
        mask = table.present[idx]
        total += float((np.abs(pred - table.values[idx]) * mask).sum())
        count += int(mask.sum())
    if count == 0:
        raise ValueError("validation split has no present descriptor cells")
    return total / count


def train_mtr(model: MtrModel, table: DescriptorTable, plan: SplitPlan,
              config: TrainConfig, batch_all: EncodedBatch,
              run_id: dict | None = None,
              checkpoint_dir: str | Path | None = None) -> list[EpochCheckpoint]:
    """Masked-L1 pre-training; one checkpoint per epoch.

    ``batch_all`` holds the encoded sequences for every table row, so the
    split plan and per-epoch permutations index into it directly.
    """
    run_id = dict(run_id or {})
    train_idx = np.asarray(plan.train_indices)
    steps_per_epoch = math.ceil(len(train_idx) / config.batch_size)
    schedule = schedule_for(config, steps_per_epoch)
    optimizer = AdamW(model.parameters(), config.adamw)
    checkpoints: list[EpochCheckpoint] = []
    step = 0
    for epoch in range(config.epochs):
        order = train_idx[epoch_permutation(len(train_idx), epoch, config.seed)]
        for batch_idx in _iter_batches(order, config.batch_size):
            lr = lr_at(schedule, step)
            batch = batch_all.take(batch_idx)
            mask = table.present[batch_idx].astype(np.float64)
            loss = ad.l1_loss(model.forward(batch), table.values[batch_idx], mask)
            if not np.isfinite(loss.data):
                raise NumericError(
                    f"non-finite training loss at step {step} (lr {lr:.3e}, "
                    f"batch rows {batch_idx[:8].tolist()}...)")
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step(lr)
            step += 1
        val_loss = _mtr_val_loss(model, batch_all, table, plan.val_indices, config.batch_size)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss after epoch {epoch}")
        ckpt = EpochCheckpoint(run_id=run_id, epoch=epoch,
                               payload=model.state_arrays(), val_loss=val_loss)
        if checkpoint_dir is not None:
            name = "{mt}_{ms}_{ds}_seed{seed}_epoch{epoch}.ckpt".format(
                mt=run_id.get("mt", "model"), ms=run_id.get("ms", "size"),
                ds=run_id.get("ds", "data"), seed=config.seed, epoch=epoch)
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            path = Path(checkpoint_dir) / name
            model.save(path, extra={"run_id": run_id, "epoch": epoch, "val_loss": val_loss})
            ckpt.path = str(path)
        checkpoints.append(ckpt)
    return checkpoints


@dataclass
class TaskSplits:
    """Encoded fine-tune task with train/validation/test label arrays."""

    train: EncodedBatch
    train_labels: np.ndarray
    val: EncodedBatch
    val_labels: np.ndarray
    test: EncodedBatch
    test_labels: np.ndarray


@dataclass
class FtEpochRecord:
    epoch: int
    val_loss: float
    test_metric: float


TASK_KINDS = ("regression", "classification")


def _ft_loss(ft: FtModel, features: np.ndarray, labels: np.ndarray, kind: str):
    out = ft.forward_from_features(features)
    pred = ad.reshape(out, (out.shape[0],))
    if kind == "regression":
        return ad.l1_loss(pred, labels)
    return ad.bce_with_logits(pred, labels)


def _extract_features(ft: FtModel, batch: EncodedBatch, batch_size: int) -> np.ndarray:
    feats = [ft.features(batch.take(idx))
             for idx in _iter_batches(np.arange(len(batch)), batch_size)]
    return np.concatenate(feats, axis=0)


def train_ft(mtr_model: MtrModel, task: TaskSplits, task_kind: str,
             config: TrainConfig, iteration: int,
             head_hidden: int | None = None) -> list[FtEpochRecord]:
    """Head-only fine-tuning on a frozen backbone.

    The iteration index perturbs only the seed (head init and shuffles).
    Because the backbone never changes, pooled features are computed once
    per split and the head trains on them; the result is identical to
    running the full model every step. Emits one record per epoch with the
    validation loss and the test metric (RMSE for regression, AUC-ROC for
    classification).
    """
    if task_kind not in TASK_KINDS:
        raise ValueError(f"task_kind must be one of {TASK_KINDS}, got {task_kind!r}")
    if task_kind == "classification":
        for name, labels in (("train", task.train_labels), ("val", task.val_labels),
                             ("test", task.test_labels)):
            if not np.isin(labels, (0.0, 1.0)).all():
                raise ValueError(f"classification labels outside {{0,1}} in {name} split")

    ft_seed = (config.seed + 0x9E3779B97F4A7C15 * (iteration + 1)) & 0xFFFF_FFFF_FFFF_FFFF
    ft = freeze_backbone(mtr_model, head_seed=ft_seed, head_hidden=head_hidden)
    checksum_before = ft.backbone_checksum()

    train_feats = _extract_features(ft, task.train, config.batch_size)
    val_feats = _extract_features(ft, task.val, config.batch_size)
    test_feats = _extract_features(ft, task.test, config.batch_size)

    steps_per_epoch = math.ceil(len(train_feats) / config.batch_size)
    schedule = schedule_for(config, steps_per_epoch)
    optimizer = AdamW(ft.head_parameters(), config.adamw)

    records: list[FtEpochRecord] = []
    step = 0
    for epoch in range(config.epochs):
        order = epoch_permutation(len(train_feats), epoch, ft_seed)
        for batch_idx in _iter_batches(order, config.batch_size):
            lr = lr_at(schedule, step)
            loss = _ft_loss(ft, train_feats[batch_idx], task.train_labels[batch_idx], task_kind)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite fine-tune loss at step {step} (lr {lr:.3e})")
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step(lr)
            step += 1
        val_loss = float(_ft_loss(ft, val_feats, task.val_labels, task_kind).data)
        test_pred = ft.forward_from_features(test_feats).data[:, 0]
        if task_kind == "regression":
            metric = rmse(test_pred, task.test_labels)
        else:
            metric = auc_roc(test_pred, task.test_labels)
        records.append(FtEpochRecord(epoch=epoch, val_loss=val_loss, test_metric=metric))

    if ft.backbone_checksum() != checksum_before:
        raise RuntimeError("frozen backbone changed during fine-tuning")
    return records
