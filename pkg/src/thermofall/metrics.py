"""Evaluation metrics (ROC-AUC, accuracy, F1, MCC) and per-sample
inference time measurement.

AUC uses the rank (Mann-Whitney) formulation: the probability that a
random positive outscores a random negative, with ties counted as 0.5.
MCC is defined as 0 whenever a denominator factor vanishes.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass
class EvalReport:
    auc: float
    accuracy: float
    f1: float
    mcc: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "auc": round(self.auc, 6),
                "accuracy": round(self.accuracy, 6),
                "f1": round(self.f1, 6),
                "mcc": round(self.mcc, 6),
                "tp": self.tp,
                "fp": self.fp,
                "tn": self.tn,
                "fn": self.fn,
                "threshold": self.threshold,
            }
        )


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores and labels must be equal-length vectors, got {scores.shape}, {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def roc_auc(scores, labels) -> float:
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc requires both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def confusion_metrics(scores, labels, threshold: float = 0.5) -> EvalReport:
    scores, labels = _validate(scores, labels)
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    pred = (scores >= threshold).astype(np.int64)
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    tn = int(((pred == 0) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    total = tp + fp + tn + fn
    accuracy = (tp + tn) / total
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = 0.0 if denom == 0 else (tp * tn - fp * fn) / math.sqrt(denom)
    if 0 < (labels == 1).sum() < labels.size:
        auc = roc_auc(scores, labels)
    else:
        auc = float("nan")
    return EvalReport(auc, accuracy, f1, mcc, tp, fp, tn, fn, threshold)


@dataclass
class PsitResult:
    median_ms: float
    p95_ms: float
    samples_ms: list[float]

    def within_budget(self, budget_ms: float) -> bool:
        return self.p95_ms <= budget_ms


def measure_psit(model, sample_batch, repetitions: int = 20, warmup: int = 3) -> PsitResult:
    """Wall-clock milliseconds per sample over repeated inference forwards.

    Each repetition times one full-batch forward and divides by the batch
    size; the first `warmup` runs are discarded.
    """
    if warmup < 3:
        raise ValueError("at least 3 warmup runs are required")
    batch = np.asarray(sample_batch)
    b = batch.shape[0]
    for _ in range(warmup):
        model.forward(batch)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        model.forward(batch)
        times.append((time.perf_counter() - t0) * 1000.0 / b)
    return PsitResult(float(np.median(times)), float(np.percentile(times, 95)), times)
