"""Classification metrics built from a confusion matrix."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import LabelError

PROB_FLOOR = 1e-300  # keeps -log p finite for hard zeros


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    ce_loss: float
    precision: list[float]
    recall: list[float]
    n_windows: int

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes})")
    return np.bincount(labels * n_classes + preds, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def ce_sum(probs: np.ndarray, labels: np.ndarray) -> float:
    p = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(p, PROB_FLOOR)).sum())


def from_confusion(conf: np.ndarray, total_ce: float) -> MetricsReport:
    conf = np.asarray(conf, dtype=np.int64)
    n = int(conf.sum())
    if n < 1:
        raise ValueError("metrics need at least one window")
    tp = np.diag(conf).astype(np.float64)
    pred_pos = conf.sum(axis=0)
    true_pos = conf.sum(axis=1)
    precision = np.divide(tp, pred_pos, out=np.zeros_like(tp), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros_like(tp), where=true_pos > 0)
    # 2tp / (2tp + fp + fn); a class never seen nor predicted scores 0
    denom = pred_pos + true_pos
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return MetricsReport(
        accuracy=float(tp.sum() / n),
        macro_f1=float(f1.mean()),
        ce_loss=float(total_ce / n),
        precision=precision.tolist(),
        recall=recall.tolist(),
        n_windows=n,
    )


def compute_metrics(probs, labels) -> MetricsReport:
    probs = np.asarray(getattr(probs, "data", probs), dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError("probs must be [n, C] with one label per row")
    conf = confusion_matrix(labels, probs.argmax(axis=1), probs.shape[1])
    return from_confusion(conf, ce_sum(probs, labels))
