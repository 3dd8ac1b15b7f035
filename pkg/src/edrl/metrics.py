"""Accuracy, macro one-vs-rest AUC (midrank ties) and macro F1."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class MetricsReport:
    accuracy: float
    auc: float | None
    f1: float
    per_class: list[dict] = field(default_factory=list)
    regime: str = "complete"
    epoch: int = -1
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_auc(scores, positive) -> float | None:
    """Mann-Whitney AUC; None when either class is absent."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    r = midranks(scores)
    return float((r[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(probs: np.ndarray, labels: np.ndarray) -> float | None:
    vals = [binary_auc(probs[:, k], labels == k) for k in range(probs.shape[1])]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def confusion(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def macro_f1(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Unweighted mean F1 over classes that occur in the labels or the predictions."""
    cm = confusion(pred, labels, n_classes)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    active = (support + predicted) > 0
    f1 = 2.0 * tp[active] / (support[active] + predicted[active])
    return float(f1.mean())


def compute_metrics(probs: np.ndarray, labels: np.ndarray, regime: str = "complete", epoch: int = -1) -> MetricsReport:
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty test set")
    k = probs.shape[1]
    pred = probs.argmax(axis=1)
    cm = confusion(pred, labels, k)
    correct = int(np.trace(cm))
    per_class = []
    for c in range(k):
        tp, sup, prd = int(cm[c, c]), int(cm[c].sum()), int(cm[:, c].sum())
        per_class.append({
            "class": c,
            "support": sup,
            "predicted": prd,
            "correct": tp,
            "f1": 2.0 * tp / (sup + prd) if sup + prd else None,
            "auc": binary_auc(probs[:, c], labels == c),
        })
    return MetricsReport(
        accuracy=correct / len(labels),
        auc=macro_auc(probs, labels),
        f1=macro_f1(pred, labels, k),
        per_class=per_class,
        regime=regime,
        epoch=epoch,
        n=len(labels),
    )
