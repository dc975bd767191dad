"""One-vs-rest classification metrics, ROC/AUC, and per-class reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CLASSES

METRIC_KEYS = ("accuracy", "sensitivity", "specificity", "auc", "f1", "mcc", "dice")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_counts(predicted, true, positive_class) -> ConfusionCounts:
    predicted = list(predicted)
    true = list(true)
    if len(predicted) != len(true):
        raise ValueError(f"length mismatch: {len(predicted)} predictions, {len(true)} labels")
    pred_pos = np.array([p == positive_class for p in predicted], dtype=bool)
    true_pos = np.array([t == positive_class for t in true], dtype=bool)
    return ConfusionCounts(
        tp=int(np.sum(pred_pos & true_pos)),
        fp=int(np.sum(pred_pos & ~true_pos)),
        tn=int(np.sum(~pred_pos & ~true_pos)),
        fn=int(np.sum(~pred_pos & true_pos)),
    )


def _ratio(num, den) -> float:
    # zero denominators yield 0; degenerate_metrics() reports them
    return num / den if den else 0.0


def accuracy(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total)


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)


def f1(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def dice(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def mcc(c: ConfusionCounts) -> float:
    factors = (c.tp + c.fp, c.tp + c.fn, c.tn + c.fp, c.tn + c.fn)
    if 0 in factors:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(math.prod(factors))


def degenerate_metrics(c: ConfusionCounts) -> list:
    """Names of count-based metrics whose denominator is zero."""
    out = []
    if c.total == 0:
        out.append("accuracy")
    if c.tp + c.fn == 0:
        out.append("sensitivity")
    if c.tn + c.fp == 0:
        out.append("specificity")
    if 2 * c.tp + c.fp + c.fn == 0:
        out += ["f1", "dice"]
    if 0 in (c.tp + c.fp, c.tp + c.fn, c.tn + c.fp, c.tn + c.fn):
        out.append("mcc")
    return out


# ----------------------------------------------------------------------- ROC


@dataclass(frozen=True)
class RocCurve:
    points: tuple  # (fpr, tpr) pairs from (0, 0) to (1, 1)
    thresholds: tuple

    @property
    def fpr(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def tpr(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def roc_curve(scores, labels) -> RocCurve:
    """Sweep thresholds over the distinct scores, highest first.

    Tied scores move together, giving one point per distinct score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0:
        raise ValueError("roc_curve needs at least one positive label")
    if n_neg == 0:
        raise ValueError("roc_curve needs at least one negative label")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of every run of equal scores
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    points = [(0.0, 0.0)] + [(fp / n_neg, tp / n_pos) for tp, fp in zip(tps.tolist(), fps.tolist())]
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return RocCurve(tuple(points), tuple(s[ends].tolist()))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the (FPR, TPR) polyline."""
    area = 0.0
    for (x0, y0), (x1, y1) in zip(curve.points, curve.points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def mann_whitney_auc(scores, labels) -> float:
    """Fraction of positive/negative pairs ordered correctly, ties counting half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins) / (pos.size * neg.size)


def confusion_matrix(predicted, true, classes=CLASSES) -> list:
    """Rows are true classes, columns predicted classes."""
    index = {c: i for i, c in enumerate(classes)}
    predicted, true = list(predicted), list(true)
    if len(predicted) != len(true):
        raise ValueError(f"length mismatch: {len(predicted)} predictions, {len(true)} labels")
    m = [[0] * len(classes) for _ in classes]
    for p, t in zip(predicted, true):
        m[index[t]][index[p]] += 1
    return m


# -------------------------------------------------------------------- report


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float
    sensitivity: float
    specificity: float
    auc: float
    f1: float
    mcc: float
    dice: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_KEYS}


def class_metrics(c: ConfusionCounts, auc_value: float) -> ClassMetrics:
    return ClassMetrics(accuracy(c), sensitivity(c), specificity(c), auc_value, f1(c), mcc(c), dice(c))


@dataclass
class MetricsReport:
    classes: tuple
    per_class: dict
    mean: ClassMetrics
    confusion: list
    counts: dict
    degenerate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "per_class": {c: self.per_class[c].to_dict() for c in self.classes},
            "mean": self.mean.to_dict(),
            "confusion_matrix": self.confusion,
            "counts": {
                c: {"tp": k.tp, "fp": k.fp, "tn": k.tn, "fn": k.fn} for c, k in self.counts.items()
            },
            "degenerate": {c: list(v) for c, v in self.degenerate.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        header = f"{'Class':<13}" + "".join(f"{k:>12}" for k in METRIC_KEYS)
        lines = [header, "-" * len(header)]
        rows = [(c, self.per_class[c]) for c in self.classes] + [("Media", self.mean)]
        for name, m in rows:
            lines.append(f"{name:<13}" + "".join(f"{getattr(m, k):>12.4f}" for k in METRIC_KEYS))
        lines.append("")
        lines.append("Confusion matrix (rows: true, columns: predicted)")
        width = max(len(c) for c in self.classes) + 1
        lines.append(" " * width + "".join(f"{c[:10]:>11}" for c in self.classes))
        for c, row in zip(self.classes, self.confusion):
            lines.append(f"{c:<{width}}" + "".join(f"{v:>11d}" for v in row))
        return "\n".join(lines) + "\n"


def report_from_scores(true_idx, probs, classes=CLASSES) -> MetricsReport:
    """Build a report from true class indices and an ``[N, C]`` score matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    true_idx = np.asarray(true_idx, dtype=np.int64)
    if true_idx.size == 0:
        raise ValueError("cannot evaluate an empty sample set")
    if probs.shape != (true_idx.size, len(classes)):
        raise ValueError(f"scores shape {probs.shape} != ({true_idx.size}, {len(classes)})")
    pred_idx = probs.argmax(axis=1)
    per_class, counts, degenerate = {}, {}, {}
    for k, name in enumerate(classes):
        c = confusion_counts(pred_idx.tolist(), true_idx.tolist(), k)
        flags = degenerate_metrics(c)
        positives = true_idx == k
        if positives.all() or not positives.any():
            auc_value = 0.0
            flags.append("auc")
        else:
            auc_value = auc(roc_curve(probs[:, k], positives))
        per_class[name] = class_metrics(c, auc_value)
        counts[name] = c
        if flags:
            degenerate[name] = flags
    mean = ClassMetrics(
        *(float(np.mean([getattr(per_class[c], key) for c in classes])) for key in METRIC_KEYS)
    )
    matrix = confusion_matrix(pred_idx.tolist(), true_idx.tolist(), range(len(classes)))
    return MetricsReport(tuple(classes), per_class, mean, matrix, counts, degenerate)


def predict_proba(model, samples, batch_size: int = 64) -> np.ndarray:
    from . import tensor as T

    rows = []
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            x = np.stack([s.pixels for s in samples[start : start + batch_size]])
            rows.append(T.softmax(model.forward(T.Tensor(x)), axis=-1).data)
    return np.concatenate(rows)


def evaluate_model(model, samples, class_list=CLASSES) -> MetricsReport:
    if not samples:
        raise ValueError("cannot evaluate an empty sample set")
    true_idx = [class_list.index(s.label) for s in samples]
    if len(set(true_idx)) < 2:
        raise ValueError("evaluation needs samples from at least two classes")
    return report_from_scores(true_idx, predict_proba(model, samples), class_list)


# ----------------------------------------------------------- predictions CSV


class PredictionsError(ValueError):
    pass


PREDICTION_HEADER = ["id", "true_label"] + [f"score_{c}" for c in CLASSES]


def write_predictions(path, samples, probs) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTION_HEADER)
        for s, row in zip(samples, probs):
            writer.writerow([s.id, s.label] + [repr(float(v)) for v in row])


def read_predictions(path) -> tuple:
    """Return ``(ids, true class indices, [N, 5] scores)``; rows must sum to 1 within 1e-6."""
    ids, true_idx, rows = [], [], []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PREDICTION_HEADER:
            raise PredictionsError(f"{path}:1: header must be {','.join(PREDICTION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PREDICTION_HEADER):
                raise PredictionsError(f"{path}:{lineno}: expected {len(PREDICTION_HEADER)} fields, got {len(row)}")
            if row[1] not in CLASSES:
                raise PredictionsError(f"{path}:{lineno}: unknown label {row[1]!r}")
            try:
                scores = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise PredictionsError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) and v >= 0 for v in scores):
                raise PredictionsError(f"{path}:{lineno}: scores must be finite and non-negative")
            if abs(math.fsum(scores) - 1.0) > 1e-6:
                raise PredictionsError(f"{path}:{lineno}: scores sum to {math.fsum(scores)!r}, not 1")
            ids.append(row[0])
            true_idx.append(CLASSES.index(row[1]))
            rows.append(scores)
    if not rows:
        raise PredictionsError(f"{path}: no prediction rows")
    return ids, np.array(true_idx), np.array(rows)


def metrics_from_csv(path) -> MetricsReport:
    _, true_idx, probs = read_predictions(path)
    return report_from_scores(true_idx, probs)
