"""Regression and classification metrics."""

from __future__ import annotations

import csv
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "UndefinedMetricError",
    "confusion_matrix",
    "r_squared",
    "balanced_accuracy",
    "f1_per_class",
    "calibration_curve",
    "write_calibration_csv",
    "classification_report",
    "median_report",
]


class UndefinedMetricError(ValueError):
    pass


def confusion_matrix(truth: Iterable[int], pred: Iterable[int], n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    t = np.asarray(list(truth), dtype=int)
    p = np.asarray(list(pred), dtype=int)
    if t.shape != p.shape:
        raise ValueError("truth and pred lengths differ")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def r_squared(truth: Sequence[float], pred: Sequence[float]) -> float:
    t = np.asarray(truth, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.shape != p.shape or t.size == 0:
        raise ValueError("truth and pred must have equal nonzero length")
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0:
        raise UndefinedMetricError("R^2 is undefined for constant truth")
    return 1.0 - float(((t - p) ** 2).sum()) / ss_tot


def balanced_accuracy(cm: np.ndarray) -> float:
    """Mean per-class recall."""
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    empty = np.flatnonzero(support == 0)
    if empty.size:
        raise UndefinedMetricError(f"class {int(empty[0])} has no true samples")
    return float(np.mean(np.diag(cm) / support))


def f1_per_class(cm: np.ndarray) -> np.ndarray:
    """F1 per class; 0 wherever precision + recall is 0 or undefined."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    pred_n = cm.sum(axis=0)
    true_n = cm.sum(axis=1)
    precision = np.divide(tp, pred_n, out=np.zeros_like(tp), where=pred_n > 0)
    recall = np.divide(tp, true_n, out=np.zeros_like(tp), where=true_n > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def calibration_curve(truth: Sequence[float], pred: Sequence[float], n_points: int = 20) -> list[tuple[float, float, int]]:
    """Mean prediction within equal-width bins of the true score.

    Returns ``(truth_bin_center, mean_pred, count)`` for every nonempty bin.
    """
    t = np.asarray(truth, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.size == 0 or t.shape != p.shape:
        raise ValueError("calibration needs equal nonzero-length inputs")
    lo, hi = float(t.min()), float(t.max())
    if hi == lo:
        return [(lo, float(p.mean()), int(t.size))]
    width = (hi - lo) / n_points
    idx = np.clip(((t - lo) / width).astype(int), 0, n_points - 1)
    counts = np.bincount(idx, minlength=n_points)
    sums = np.bincount(idx, weights=p, minlength=n_points)
    return [(lo + (i + 0.5) * width, float(sums[i] / counts[i]), int(counts[i]))
            for i in range(n_points) if counts[i] > 0]


def write_calibration_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["truth_bin", "mean_pred", "count"])
        for c, m, n in points:
            w.writerow([repr(float(c)), repr(float(m)), int(n)])


def classification_report(truth: Sequence[int], pred: Sequence[int], n_classes: int = 3) -> dict:
    cm = confusion_matrix(truth, pred, n_classes)
    try:
        bacc = balanced_accuracy(cm)
    except UndefinedMetricError:
        # recall over the classes that are present
        support = cm.sum(axis=1)
        bacc = float(np.mean(np.diag(cm)[support > 0] / support[support > 0]))
    return {
        "balanced_accuracy": bacc,
        "f1": [float(x) for x in f1_per_class(cm)],
        "confusion": cm.tolist(),
    }


def median_report(reports: Sequence[dict]) -> dict:
    """Element-wise median of balanced accuracy and per-class F1 over runs."""
    if not reports:
        raise ValueError("no reports to aggregate")
    return {
        "balanced_accuracy": float(np.median([r["balanced_accuracy"] for r in reports])),
        "f1": [float(x) for x in np.median(np.array([r["f1"] for r in reports]), axis=0)],
    }
