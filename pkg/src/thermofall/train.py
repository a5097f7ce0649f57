"""Supervised training: binary cross-entropy, Adam, class-balanced batch
generation, and early stopping on validation loss with best-weight restore.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, Tensor, clamp, log, mul, reduce_mean
from .metrics import confusion_metrics, roc_auc
from .model import Model

PRED_CLIP = 1e-7


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 75
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    seed: int = 0
    min_delta: float = 1e-5

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "eps", "min_delta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ValueError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step = 0


def bce_loss(pred: Tensor, labels: Tensor) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to
    [1e-7, 1-1e-7] before the logs."""
    if pred.shape != labels.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {labels.shape}")
    lab = labels.data
    if not np.isin(lab, (0.0, 1.0)).all():
        raise ValueError("labels must be exactly 0 or 1")
    q = clamp(pred, PRED_CLIP, 1.0 - PRED_CLIP)
    term = mul(labels, log(q)) + mul(1.0 - labels, log(1.0 - q))
    return -reduce_mean(term)


def bce_value(scores: np.ndarray, labels: np.ndarray) -> float:
    q = np.clip(scores.astype(np.float64), PRED_CLIP, 1.0 - PRED_CLIP)
    y = labels.astype(np.float64)
    return float(-(y * np.log(q) + (1.0 - y) * np.log(1.0 - q)).mean())


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, cfg: TrainConfig) -> None:
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        update = (cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(p.data.dtype)
        p.data = p.data - update


def balanced_batches(dataset, batch_size: int, rng: np.random.Generator):
    """Yield one epoch of batches with ceil(B/2) falls and floor(B/2)
    non-falls each. The larger class is consumed without replacement; the
    smaller is reshuffled and reused when exhausted."""
    falls = [s for s in dataset if s.label == 1]
    nonfalls = [s for s in dataset if s.label == 0]
    if not falls or not nonfalls:
        raise ValueError("balanced_batches requires samples of both classes")
    fall_slots = (batch_size + 1) // 2
    non_slots = batch_size // 2
    n_batches = max(
        math.ceil(len(falls) / fall_slots),
        math.ceil(len(nonfalls) / non_slots),
    )
    fall_q = _ClassQueue(falls, rng)
    non_q = _ClassQueue(nonfalls, rng)
    for _ in range(n_batches):
        batch = fall_q.take(fall_slots) + non_q.take(non_slots)
        order = rng.permutation(len(batch))
        x = np.stack([batch[i].features() for i in order])
        y = np.array([[batch[i].label] for i in order], dtype=x.dtype)
        yield x, y


class _ClassQueue:
    def __init__(self, items, rng):
        self.items = items
        self.rng = rng
        self.queue: list = []

    def take(self, n: int) -> list:
        out = []
        while len(out) < n:
            if not self.queue:
                self.queue = [self.items[i] for i in self.rng.permutation(len(self.items))]
            out.append(self.queue.pop())
        return out


class EarlyStopper:
    """Stops after `patience` consecutive epochs whose validation loss did
    not improve by more than min_delta."""

    def __init__(self, patience: int, min_delta: float = 1e-5):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, loss: float, epoch: int) -> bool:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float
    val_acc: float
    val_f1: float
    val_mcc: float


@dataclass
class FitResult:
    history: list[EpochRecord]
    model: Model
    best_epoch: int


def evaluate_scores(model: Model, dataset, batch_size: int):
    scores = []
    labels = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        x = np.stack([s.features() for s in chunk])
        scores.append(model.forward(x).data.reshape(-1))
        labels.extend(s.label for s in chunk)
    return np.concatenate(scores), np.array(labels)


def fit(model: Model, train_set, val_set, cfg: TrainConfig, log=None) -> FitResult:
    """Train with Adam and balanced batches; early-stop on validation loss
    and restore the best epoch's weights."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    rng_batches = np.random.default_rng(seeds[0])
    rng_dropout = np.random.default_rng(seeds[1])
    state = AdamState(model.params)
    stopper = EarlyStopper(cfg.patience, cfg.min_delta)
    best_state = model.state_arrays()
    history: list[EpochRecord] = []

    for epoch in range(1, cfg.max_epochs + 1):
        batch_losses = []
        for x, y in balanced_batches(train_set, cfg.batch_size, rng_batches):
            pred = model.forward(x, "train", rng_dropout)
            loss = bce_loss(pred, Tensor(y, dtype=pred.data.dtype))
            model.zero_grads()
            loss.backward()
            grads = {name: p.grad for name, p in model.params.items()}
            adam_step(model.params, grads, state, cfg)
            batch_losses.append(loss.item())

        val_scores, val_labels = evaluate_scores(model, val_set, cfg.batch_size)
        val_loss = bce_value(val_scores, val_labels)
        report = confusion_metrics(val_scores, val_labels)
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(batch_losses)),
            val_loss=val_loss,
            val_auc=roc_auc(val_scores, val_labels),
            val_acc=report.accuracy,
            val_f1=report.f1,
            val_mcc=report.mcc,
        )
        history.append(record)
        if log is not None:
            log(record)
        if stopper.update(val_loss, epoch):
            best_state = model.state_arrays()
        if stopper.should_stop:
            break

    model.load_state_arrays(best_state)
    return FitResult(history, model, stopper.best_epoch or 1)


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_auc", "val_acc", "val_f1", "val_mcc")


def write_history_csv(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for rec in history:
            writer.writerow(
                [rec.epoch]
                + [f"{getattr(rec, col):.8g}" for col in HISTORY_COLUMNS[1:]]
            )
