"""Confusion matrix and the per-slice precision/recall/F1 report."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import SLICES

N_CLASSES = 3


def confusion_matrix(preds, labels) -> np.ndarray:
    """3x3 count matrix, rows = true class, columns = predicted class."""
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {len(preds)} preds vs {len(labels)} labels")
    m = np.zeros((N_CLASSES, N_CLASSES), dtype=int)
    np.add.at(m, (labels, preds), 1)
    return m


@dataclass(frozen=True)
class ClassificationReport:
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    support: tuple[int, ...]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    matrix: tuple[tuple[int, ...], ...]

    @property
    def total(self) -> int:
        return sum(self.support)

    def to_dict(self) -> dict:
        d = {}
        for i, s in enumerate(SLICES):
            d[s.label] = {
                "precision": self.precision[i],
                "recall": self.recall[i],
                "f1": self.f1[i],
                "support": self.support[i],
            }
        d["accuracy"] = self.accuracy
        d["macro_avg"] = {
            "precision": self.macro_precision,
            "recall": self.macro_recall,
            "f1": self.macro_f1,
            "support": self.total,
        }
        d["weighted_avg"] = {
            "precision": self.weighted_precision,
            "recall": self.weighted_recall,
            "f1": self.weighted_f1,
            "support": self.total,
        }
        d["confusion_matrix"] = [list(row) for row in self.matrix]
        return d


def classification_report(matrix) -> ClassificationReport:
    """Per-class metrics plus accuracy, macro and support-weighted averages.

    Zero-division convention: precision of a never-predicted class (and recall of
    an absent class) is 0; F1 is 0 when precision + recall is 0.
    """
    m = np.asarray(matrix, dtype=float)
    if m.shape != (N_CLASSES, N_CLASSES) or np.any(m < 0):
        raise ValueError("expected a nonnegative 3x3 matrix")
    total = m.sum()
    if total == 0:
        raise ValueError("no samples")
    row = m.sum(axis=1)
    col = m.sum(axis=0)
    diag = np.diag(m)
    precision = np.where(col > 0, diag / np.where(col > 0, col, 1.0), 0.0)
    recall = np.where(row > 0, diag / np.where(row > 0, row, 1.0), 0.0)
    pr = precision + recall
    f1 = np.where(pr > 0, 2 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)
    weights = row / total
    return ClassificationReport(
        precision=tuple(float(v) for v in precision),
        recall=tuple(float(v) for v in recall),
        f1=tuple(float(v) for v in f1),
        support=tuple(int(v) for v in row),
        accuracy=float(diag.sum() / total),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        weighted_precision=float(np.dot(weights, precision)),
        weighted_recall=float(np.dot(weights, recall)),
        weighted_f1=float(np.dot(weights, f1)),
        matrix=tuple(tuple(int(v) for v in r) for r in np.asarray(matrix, dtype=int)),
    )
