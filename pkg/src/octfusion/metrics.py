"""Confusion matrices and one-vs-rest per-class metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CLASSES
from .errors import LengthMismatch, MetricsError, OutOfRangeLabel


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]


@dataclass
class ClassMetrics:
    class_id: int
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    degenerate: bool = False

    @property
    def name(self) -> str:
        return CLASSES[self.class_id] if self.class_id < len(CLASSES) else str(self.class_id)


@dataclass
class MetricsReport:
    per_class: list
    accuracy: float
    confusion: ConfusionMatrix | None = None
    model: str = ""
    split: str = ""
    seed: int | None = None
    extra: dict = field(default_factory=dict)


def confusion(preds, labels, num_classes: int = len(CLASSES)) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise LengthMismatch(f"{preds.size} predictions for {labels.size} labels")
    if preds.size == 0:
        raise MetricsError("no samples to evaluate")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise OutOfRangeLabel(f"{name} outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den > 0 else (0.0, True)


def per_class_metrics(cm: ConfusionMatrix) -> list[ClassMetrics]:
    """Precision, recall and F1 per class; vanishing denominators give 0 and ``degenerate``."""
    c = cm.counts
    if cm.total <= 0:
        raise MetricsError("empty confusion matrix")
    out = []
    for k in range(cm.num_classes):
        tp = int(c[k, k])
        fp = int(c[:, k].sum()) - tp
        fn = int(c[k, :].sum()) - tp
        tn = cm.total - tp - fp - fn
        precision, d1 = _ratio(tp, tp + fp)
        recall, d2 = _ratio(tp, tp + fn)
        f1, d3 = _ratio(2 * tp, 2 * tp + fp + fn)
        out.append(ClassMetrics(k, tp, fp, fn, tn, precision, recall, f1, d1 or d2 or d3))
    return out


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total <= 0:
        raise MetricsError("empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def evaluate(preds, labels, model: str = "", split: str = "", seed=None, num_classes: int = len(CLASSES)) -> MetricsReport:
    cm = confusion(preds, labels, num_classes)
    return MetricsReport(per_class_metrics(cm), accuracy(cm), cm, model, split, seed)


def mean_report(reports: list[MetricsReport], model: str | None = None) -> MetricsReport:
    """Seed average: per-class ratios and accuracy averaged, counts summed."""
    if not reports:
        raise MetricsError("nothing to average")
    n = len(reports)
    per_class = []
    for k in range(len(reports[0].per_class)):
        rows = [r.per_class[k] for r in reports]
        per_class.append(ClassMetrics(
            k,
            sum(r.tp for r in rows), sum(r.fp for r in rows), sum(r.fn for r in rows), sum(r.tn for r in rows),
            sum(r.precision for r in rows) / n, sum(r.recall for r in rows) / n, sum(r.f1 for r in rows) / n,
            any(r.degenerate for r in rows),
        ))
    cms = [r.confusion for r in reports if r.confusion is not None]
    cm = ConfusionMatrix(sum(c.counts for c in cms)) if len(cms) == n else None
    return MetricsReport(
        per_class, sum(r.accuracy for r in reports) / n, cm,
        model if model is not None else reports[0].model, reports[0].split, None,
        {"seeds": [r.seed for r in reports]},
    )
