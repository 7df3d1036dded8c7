"""Training loop: SGD with momentum and weight decay, cosine-annealed
learning rate, burn-in scheduling, per-epoch adversarial validation, and
checkpoint selection by robust validation accuracy.

The adversarial validation set is regenerated every epoch against the
current model; early stopping means selecting the checkpoint with the best
robust validation accuracy (plus an optional patience halt).
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec, run_attack
from .data import Dataset
from .losses import LossConfig, batch_loss, ce_only
from .margins import batch_logit_margins
from .nets import Network, save_checkpoint


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; carries context and the last finite checkpoint."""

    def __init__(self, message, epoch, batch_index, last_checkpoint):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    burn_in_epochs: int = 0
    batch_size: int = 128
    lr0: float = 0.1
    lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    loss: LossConfig = field(default_factory=LossConfig)
    adv_val: AttackSpec = field(default_factory=lambda: AttackSpec(kind="pgd", steps=20))
    adv_val_size: int = 1024
    seed: int = 0
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("TrainConfig: epochs must be >= 1")
        if not 0 <= self.burn_in_epochs <= self.epochs:
            raise ValueError("TrainConfig: need 0 <= burn_in_epochs <= epochs")
        if self.batch_size < 1:
            raise ValueError("TrainConfig: batch_size must be >= 1")
        if self.lr_min > self.lr0:
            raise ValueError("TrainConfig: lr_min must not exceed lr0")
        if not 0 <= self.momentum < 1:
            raise ValueError("TrainConfig: momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("TrainConfig: weight_decay must be >= 0")
        if self.adv_val_size < 1:
            raise ValueError("TrainConfig: adv_val_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "burn_in_epochs": self.burn_in_epochs,
            "batch_size": self.batch_size,
            "lr0": self.lr0,
            "lr_min": self.lr_min,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "loss": self.loss.to_dict(),
            "adv_val": self.adv_val.to_dict(),
            "adv_val_size": self.adv_val_size,
            "seed": self.seed,
            "early_stop_patience": self.early_stop_patience,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig.from_dict(d.pop("loss", {}))
        adv_val = AttackSpec.from_dict(d.pop("adv_val", {"kind": "pgd", "steps": 20}))
        return cls(loss=loss, adv_val=adv_val, **d)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    ce_loss: float
    mm_loss: float
    clean_train_acc: float
    clean_val_acc: float
    robust_val_acc: float
    robust_val_loss: float
    wall_time: float

    FIELDS = ("epoch", "lr", "ce_loss", "mm_loss", "clean_train_acc",
              "clean_val_acc", "robust_val_acc", "robust_val_loss", "wall_time")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_checkpoint: Network
    stopped_reason: str  # completed | early-stop


def cosine_lr(epoch: int, total: int, lr0: float, lr_min: float) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi * epoch / total)) / 2."""
    if total < 1:
        raise ValueError("cosine_lr: total must be >= 1")
    if not 0 <= epoch <= total:
        raise ValueError(f"cosine_lr: epoch {epoch} outside [0, {total}]")
    return lr_min + (lr0 - lr_min) * (1.0 + np.cos(np.pi * epoch / total)) / 2.0


def sgd_step(params, grads, velocity, lr: float, momentum: float, weight_decay: float) -> None:
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v. In place."""
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(
                f"sgd_step: shape mismatch param {p.shape}, grad {g.shape}, velocity {v.shape}"
            )
        v *= momentum
        v += g + weight_decay * p.data
        p.data = p.data - lr * v


def _clean_accuracy(net, dataset: Dataset) -> float:
    phi, _ = batch_logit_margins(net(dataset.inputs).data, dataset.labels)
    return float((phi > 0).mean())


def _adv_validation(net, val: Dataset, config: TrainConfig, epoch: int):
    """Robust accuracy and mean adversarial CE on a fresh per-epoch subset."""
    rng = np.random.default_rng([config.seed, 104729, epoch])
    n = min(config.adv_val_size, len(val))
    idx = rng.choice(len(val), size=n, replace=False)
    subset = val.subset(idx)
    result = run_attack(net, subset.inputs, subset.labels, config.adv_val)
    phi_clean, _ = batch_logit_margins(net(subset.inputs).data, subset.labels)
    robust = float(((phi_clean > 0) & ~result.success_mask).mean())
    return robust, float(result.loss_achieved.mean())


def train(net: Network, data, config: TrainConfig, out_dir=None) -> TrainResult:
    """Minibatch SGD with burn-in scheduling and adversarial validation.

    data is a (train, val) pair of Datasets. Epochs below burn_in_epochs use
    plain cross-entropy; afterwards config.loss applies. Each epoch ends
    with adversarial validation against the current model; the checkpoint
    with the highest robust validation accuracy (earliest on ties) is
    returned. With out_dir set, checkpoints are written at every
    improvement plus at the end, and history rows are appended to
    history.csv as they are produced.
    """
    train_ds, val_ds = data
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train: train and validation sets must be non-empty")
    history_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        history_path = os.path.join(out_dir, "history.csv")
        with open(history_path, "w", newline="") as fh:
            csv.writer(fh).writerow(EpochRecord.FIELDS)

    velocity = [np.zeros(p.shape) for p in net.params]
    history: list[EpochRecord] = []
    best_acc = -1.0
    best_epoch = 0
    best_snapshot = net.snapshot()
    last_finite = net.snapshot()
    epochs_since_best = 0
    stopped_reason = "completed"

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, config.epochs, config.lr0, config.lr_min)
        loss_cfg = ce_only(config.loss) if epoch < config.burn_in_epochs else config.loss
        perm = np.random.default_rng([config.seed, 15485863, epoch]).permutation(len(train_ds))
        ce_sum, mm_sum, batches = 0.0, 0.0, 0
        for start in range(0, len(train_ds), config.batch_size):
            idx = perm[start : start + config.batch_size]
            net.zero_grad()
            report = batch_loss(net, (train_ds.inputs[idx], train_ds.labels[idx]), loss_cfg)
            if not np.isfinite(report.total):
                raise TrainingDivergedError(
                    f"non-finite loss {report.total} at epoch {epoch}, batch {batches}",
                    epoch, batches, last_finite,
                )
            report.loss.backward()
            sgd_step(net.params, [p.grad for p in net.params], velocity,
                     lr, config.momentum, config.weight_decay)
            ce_sum += report.ce_part
            mm_sum += report.mm_part
            batches += 1
        last_finite = net.snapshot()

        robust_acc, robust_loss = _adv_validation(net, val_ds, config, epoch)
        record = EpochRecord(
            epoch=epoch, lr=lr,
            ce_loss=ce_sum / batches, mm_loss=mm_sum / batches,
            clean_train_acc=_clean_accuracy(net, train_ds),
            clean_val_acc=_clean_accuracy(net, val_ds),
            robust_val_acc=robust_acc, robust_val_loss=robust_loss,
            wall_time=time.perf_counter() - t0,
        )
        history.append(record)
        if history_path is not None:
            with open(history_path, "a", newline="") as fh:
                csv.writer(fh).writerow(record.row())

        if robust_acc > best_acc:
            best_acc = robust_acc
            best_epoch = epoch
            best_snapshot = net.snapshot()
            epochs_since_best = 0
            if out_dir is not None:
                best = net.copy()
                save_checkpoint(best, os.path.join(out_dir, "best.ckpt"))
        else:
            epochs_since_best += 1
            if config.early_stop_patience is not None \
                    and epochs_since_best >= config.early_stop_patience:
                stopped_reason = "early-stop"
                break

    best_net = net.copy()
    best_net.restore(best_snapshot)
    if out_dir is not None:
        save_checkpoint(net, os.path.join(out_dir, "final.ckpt"))
        save_checkpoint(best_net, os.path.join(out_dir, "best.ckpt"))
    return TrainResult(history, best_epoch, best_net, stopped_reason)


def select_best(history: list[EpochRecord]) -> int:
    """Index of the highest robust validation accuracy; earliest on ties."""
    if not history:
        raise ValueError("select_best: history is empty")
    accs = [r.robust_val_acc for r in history]
    return int(np.argmax(accs))
