"""Accuracy, per-class precision/recall/F1 and row-normalized confusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


def confusion_counts(preds, truths, n: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ValueError(f"{preds.size} predictions vs {truths.size} truths")
    for arr in (preds, truths):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise IndexError(f"label out of range for {n} classes")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    return counts


def normalize_rows(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized matrix plus a mask of rows with no samples (left zero)."""
    totals = counts.sum(axis=1)
    absent = totals == 0
    matrix = np.zeros(counts.shape, dtype=np.float64)
    matrix[~absent] = counts[~absent] / totals[~absent, None]
    return matrix, absent


def confusion_matrix(preds, truths, n: int) -> np.ndarray:
    """Entry (i, j): fraction of truth-i samples predicted j. Absent rows are zero."""
    matrix, _ = normalize_rows(confusion_counts(preds, truths, n))
    return matrix


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den != 0)
    return out


@dataclass
class MetricsReport:
    class_order: list[str]
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: np.ndarray
    absent_rows: np.ndarray

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())

    @classmethod
    def from_counts(cls, counts: np.ndarray, class_order: Sequence[str]) -> "MetricsReport":
        total = counts.sum()
        if total == 0:
            raise ValueError("cannot report metrics on an empty evaluation set")
        tp = np.diag(counts).astype(np.float64)
        predicted = counts.sum(axis=0)
        actual = counts.sum(axis=1)
        precision = _safe_div(tp, predicted)
        recall = _safe_div(tp, actual)
        f1 = _safe_div(2 * precision * recall, precision + recall)
        confusion, absent = normalize_rows(counts)
        return cls(
            list(class_order), float(tp.sum() / total), precision, recall, f1, actual, confusion, absent
        )

    @classmethod
    def from_predictions(cls, preds, truths, class_order: Sequence[str]) -> "MetricsReport":
        return cls.from_counts(confusion_counts(preds, truths, len(class_order)), class_order)

    def summary(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }

    def format(self) -> str:
        lines = [f"{k} {v:.4f}" for k, v in self.summary().items()]
        lines.append("class precision recall f1 support")
        for i, name in enumerate(self.class_order):
            lines.append(
                f"{name} {self.precision[i]:.4f} {self.recall[i]:.4f} {self.f1[i]:.4f} {self.support[i]}"
            )
        lines.append("confusion (rows: actual, cols: predicted) " + " ".join(self.class_order))
        for i, name in enumerate(self.class_order):
            flag = "  (no samples)" if self.absent_rows[i] else ""
            lines.append(f"{name} " + " ".join(f"{v:.2f}" for v in self.confusion[i]) + flag)
        return "\n".join(lines)

    def confusion_csv(self) -> str:
        rows = [",".join(["actual", *self.class_order])]
        for name, row in zip(self.class_order, self.confusion):
            rows.append(",".join([name, *(repr(float(v)) for v in row)]))
        return "\n".join(rows) + "\n"
