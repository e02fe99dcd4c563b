"""Binary classification metrics: confusion matrix, per-class P/R/F1, ROC, AUC."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np


def _ratio(num: float, den: float) -> float:
    # 0/0 is reported as 0 rather than nan
    return num / den if den else 0.0


def confusion_matrix(y_true, y_pred) -> np.ndarray:
    """2x2 counts, rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) > 1):
        raise ValueError("labels must be 0 or 1")
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def roc_curve(y_true, scores) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) points, predicting positive when score >= threshold.

    Thresholds are every distinct score plus the sentinels 0 and 1, swept from
    high to low; a leading (0, 0, inf) point anchors the curve at the origin
    when the highest threshold already flags something.
    """
    y = np.asarray(y_true, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise ValueError("y_true and scores differ in length")
    P = int((y == 1).sum())
    N = int((y == 0).sum())
    thresholds = np.unique(np.concatenate([s, [0.0, 1.0]]))[::-1]

    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp_cum = np.concatenate([[0], np.cumsum(y_sorted == 1)])
    fp_cum = np.concatenate([[0], np.cumsum(y_sorted == 0)])
    # number of scores >= t, via s_sorted descending
    n_at = np.searchsorted(-s_sorted, -thresholds, side="right")

    points = []
    for t, k in zip(thresholds, n_at):
        points.append((_ratio(fp_cum[k], N), _ratio(tp_cum[k], P), float(t)))
    if points and (points[0][0], points[0][1]) != (0.0, 0.0):
        points.insert(0, (0.0, 0.0, math.inf))
    return points


def auc_trapezoid(points) -> float:
    fpr = np.array([p[0] for p in points], dtype=np.float64)
    tpr = np.array([p[1] for p in points], dtype=np.float64)
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class EvalReport:
    class_names: tuple[str, str]
    confusion: np.ndarray
    roc_points: list[tuple[float, float, float]] = field(default_factory=list)
    auc: float = math.nan

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return _ratio(float(np.trace(self.confusion)), float(self.total))

    def precision(self, c: int) -> float:
        return _ratio(float(self.confusion[c, c]), float(self.confusion[:, c].sum()))

    def recall(self, c: int) -> float:
        return _ratio(float(self.confusion[c, c]), float(self.confusion[c, :].sum()))

    def f1(self, c: int) -> float:
        p, r = self.precision(c), self.recall(c)
        return _ratio(2 * p * r, p + r)

    def support(self, c: int) -> int:
        return int(self.confusion[c, :].sum())

    def to_dict(self) -> dict:
        return {
            "classes": list(self.class_names),
            "confusion": self.confusion.tolist(),
            "total": self.total,
            "accuracy": self.accuracy,
            "per_class": {
                name: {
                    "precision": self.precision(c),
                    "recall": self.recall(c),
                    "f1": self.f1(c),
                    "support": self.support(c),
                }
                for c, name in enumerate(self.class_names)
            },
            # nan (single-class evaluation set) is written as null
            "auc": None if math.isnan(self.auc) else self.auc,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        w = max(len(n) for n in self.class_names) + 2
        lines = [f"{'':<{w}}{'Precision':>10}{'Recall':>10}{'F1-score':>10}{'Support':>10}"]
        for c, name in enumerate(self.class_names):
            lines.append(
                f"{name:<{w}}{self.precision(c):>10.4f}{self.recall(c):>10.4f}"
                f"{self.f1(c):>10.4f}{self.support(c):>10d}"
            )
        lines.append(f"{'Accuracy':<{w}}{'':>10}{'':>10}{self.accuracy:>10.4f}{self.total:>10d}")
        auc = "n/a" if math.isnan(self.auc) else f"{self.auc:.4f}"
        lines.append(f"AUC {auc}")
        cm = self.confusion
        lines.append(f"confusion (rows true, cols predicted): [[{cm[0, 0]}, {cm[0, 1]}], [{cm[1, 0]}, {cm[1, 1]}]]")
        return "\n".join(lines) + "\n"

    def roc_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in self.roc_points:
            wr.writerow([repr(float(f)), repr(float(t)), "inf" if math.isinf(th) else repr(float(th))])
        return buf.getvalue()


def evaluate_scores(y_true, y_pred, scores, class_names=("Negative", "Positive")) -> EvalReport:
    """Build a report from hard predictions plus class-1 scores. AUC is nan
    when only one class is present (the ROC is undefined)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("empty evaluation set")
    cm = confusion_matrix(y_true, y_pred)
    points = roc_curve(y_true, scores)
    both = cm[0].sum() > 0 and cm[1].sum() > 0
    auc = auc_trapezoid(points) if both else math.nan
    return EvalReport(tuple(class_names), cm, points, auc)
