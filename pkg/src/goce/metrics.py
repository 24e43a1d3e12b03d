"""Classification metrics: accuracy@1, multiclass Brier, macro-F1, ECE, NLL."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

N_BINS = 10


class CountError(ValueError):
    pass


@dataclass
class MetricReport:
    accuracy_at_1: float
    brier: float
    macro_f1: float
    ece: float
    nll: float
    count: int

    def to_json(self) -> dict:
        return asdict(self)


def _check(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2:
        raise ValueError(f"predictions must be [N, C], got {probs.shape}")
    if len(probs) == 0:
        raise CountError("no predictions")
    if len(probs) != len(labels):
        raise CountError(f"{len(probs)} predictions for {len(labels)} labels")
    return probs, labels


def accuracy_at_1(probs, labels) -> float:
    probs, labels = _check(probs, labels)
    # np.argmax already resolves ties to the lowest index
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def brier(probs, labels) -> float:
    probs, labels = _check(probs, labels)
    onehot = np.eye(probs.shape[1])[labels]
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


def nll(probs, labels) -> float:
    probs, labels = _check(probs, labels)
    p_true = probs[np.arange(len(labels)), labels]
    with np.errstate(divide="ignore"):
        return float(np.mean(-np.log(p_true)))


def macro_f1(probs, labels) -> float:
    probs, labels = _check(probs, labels)
    pred = np.argmax(probs, axis=1)
    scores = []
    for c in range(probs.shape[1]):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def ece(probs, labels, n_bins: int = N_BINS) -> float:
    """Expected calibration error over equal-width bins of the top probability."""
    probs, labels = _check(probs, labels)
    conf = probs.max(axis=1)
    correct = np.argmax(probs, axis=1) == labels
    bins = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        sel = bins == b
        if sel.any():
            total += sel.mean() * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


def metrics(probs, labels) -> MetricReport:
    probs, labels = _check(probs, labels)
    return MetricReport(
        accuracy_at_1=accuracy_at_1(probs, labels),
        brier=brier(probs, labels),
        macro_f1=macro_f1(probs, labels),
        ece=ece(probs, labels),
        nll=nll(probs, labels),
        count=len(labels),
    )
