"""Confusion-matrix metrics over labeled pixels only."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .types import LabelMap, UNLABELED

UNDEFINED = float("nan")
"""Marker for 0/0 metrics. Test with :func:`is_undefined`, never compare to 0."""


def is_undefined(x: float) -> bool:
    return isinstance(x, float) and math.isnan(x)


def _arr(x):
    return x.labels if isinstance(x, LabelMap) else np.asarray(x)


def confusion_matrix(pred, truth, K: int) -> np.ndarray:
    """``cm[t, p]`` = number of labeled pixels with truth ``t`` predicted ``p``."""
    pred, truth = _arr(pred), _arr(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    if (pred == UNLABELED).any():
        raise ValueError("predictions must not contain UNLABELED")
    keep = truth != UNLABELED
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.max() >= K or p.max() >= K):
        raise ValueError(f"class index >= K={K}")
    return np.bincount(t * K + p, minlength=K * K).reshape(K, K)


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else UNDEFINED


@dataclass
class ClassMetrics:
    sensitivity: float
    specificity: float
    precision: float
    dice: float


@dataclass
class MetricsReport:
    per_class: list[ClassMetrics]
    accuracy: float
    labeled_pixels: int

    def mean(self, name: str) -> tuple[float, int]:
        """Mean of a metric over classes where it is defined, and the number skipped."""
        vals = [getattr(c, name) for c in self.per_class]
        defined = [v for v in vals if not is_undefined(v)]
        skipped = len(vals) - len(defined)
        return (float(np.mean(defined)) if defined else UNDEFINED), skipped


def per_class_metrics(cm: np.ndarray) -> MetricsReport:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if (cm < 0).any():
        raise ValueError("confusion matrix has negative entries")
    total = int(cm.sum())
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    out = []
    for k in range(cm.shape[0]):
        tp = int(cm[k, k])
        fn = int(rows[k]) - tp
        fp = int(cols[k]) - tp
        tn = total - tp - fn - fp
        out.append(
            ClassMetrics(
                sensitivity=_ratio(tp, tp + fn),
                specificity=_ratio(tn, tn + fp),
                precision=_ratio(tp, tp + fp),
                dice=_ratio(2 * tp, 2 * tp + fp + fn),
            )
        )
    return MetricsReport(out, _ratio(np.trace(cm), total), total)


def _fmt(v: float) -> str:
    return "undefined" if is_undefined(v) else f"{100 * v:.2f}"


def format_table(report: MetricsReport, names) -> str:
    names = list(names)
    width = max(len(n) for n in names + ["class"])
    head = f"{'class':<{width}}  {'sens':>9}  {'spec':>9}  {'dice':>9}  {'prec':>9}"
    lines = [head, "-" * len(head)]
    for n, c in zip(names, report.per_class):
        lines.append(
            f"{n:<{width}}  {_fmt(c.sensitivity):>9}  {_fmt(c.specificity):>9}  "
            f"{_fmt(c.dice):>9}  {_fmt(c.precision):>9}"
        )
    lines.append("-" * len(head))
    mean_dice, skipped = report.mean("dice")
    lines.append(f"mean dice: {_fmt(mean_dice)} (classes skipped: {skipped})")
    lines.append(f"overall accuracy: {_fmt(report.accuracy)}")
    lines.append(f"labeled pixels: {report.labeled_pixels}")
    return "\n".join(lines) + "\n"


def format_kv(report: MetricsReport, names) -> str:
    lines = []
    for n, c in zip(names, report.per_class):
        for metric in ("sensitivity", "specificity", "precision", "dice"):
            v = getattr(c, metric)
            lines.append(f"{n}.{metric}={'undefined' if is_undefined(v) else repr(v)}")
    mean_dice, skipped = report.mean("dice")
    lines.append(f"mean_dice={'undefined' if is_undefined(mean_dice) else repr(mean_dice)}")
    lines.append(f"mean_dice_skipped={skipped}")
    lines.append(f"accuracy={'undefined' if is_undefined(report.accuracy) else repr(report.accuracy)}")
    lines.append(f"labeled_pixels={report.labeled_pixels}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out
