"""Confusion matrices, per-class F1 and the weighted average F-score (WAF)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class MetricsReport:
    task: str
    labels: tuple
    confusion: np.ndarray  # rows: true class, columns: predicted class
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    waf: float
    n: int

    def row_normalized(self) -> np.ndarray:
        """Confusion matrix as the ratio of samples from each true category."""
        rows = self.confusion.sum(axis=1, keepdims=True)
        return np.divide(self.confusion, rows, out=np.zeros(self.confusion.shape), where=rows > 0)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def metrics_from_predictions(y_true, y_pred, labels: Sequence[str], task: str = "") -> MetricsReport:
    cm = confusion_matrix(y_true, y_pred, len(labels))
    tp = np.diag(cm).astype(float)
    predicted = cm.sum(axis=0).astype(float)
    support = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    n = int(support.sum())
    waf = float(support @ f1) / n if n else 0.0
    return MetricsReport(task, tuple(labels), cm, precision, recall, f1, support, waf, n)


def argmax_predictions(logits: np.ndarray) -> np.ndarray:
    # np.argmax picks the first maximum, i.e. the lowest class index on ties
    return np.argmax(np.asarray(logits), axis=-1)


def metrics_csv(reports: dict[str, MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "label", "support", "precision", "recall", "f1"])
    for task, r in reports.items():
        for j, lab in enumerate(r.labels):
            w.writerow([task, lab, int(r.support[j]), f"{r.precision[j]:.6f}", f"{r.recall[j]:.6f}", f"{r.f1[j]:.6f}"])
        w.writerow([task, "WAF", r.n, "", "", f"{r.waf:.6f}"])
    return buf.getvalue()


def confusion_text(r: MetricsReport) -> str:
    width = max(len(l) for l in r.labels) + 1
    head = " " * width + " ".join(f"{l[:4]:>5}" for l in r.labels)
    lines = [f"{r.task} (rows: true, columns: predicted, row-normalised)", head]
    for lab, row in zip(r.labels, r.row_normalized()):
        lines.append(f"{lab:<{width}}" + " ".join(f"{v:5.2f}" for v in row))
    return "\n".join(lines) + "\n"
