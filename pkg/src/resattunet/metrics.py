"""Confusion-matrix metrics: precision/recall/F1 (macro, micro, weighted), accuracy, IoU.

Per-class ratios are formed with exact rational arithmetic and rounded to
float once, so identities such as micro F1 == subset accuracy hold bitwise.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

IGNORE_INDEX = 0


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    macro_precision: float
    micro_precision: float
    weighted_precision: float
    macro_recall: float
    micro_recall: float
    weighted_recall: float
    macro_f1: float
    micro_f1: float
    weighted_f1: float
    subset_accuracy: float
    iou: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.to_dict().items():
            w.writerow([k, repr(v)])
        return buf.getvalue()


def confusion_matrix(labels, predictions, num_classes: int) -> np.ndarray:
    """K x K counts; entry (i, j) = pixels of true class i+1 predicted as j+1.

    Pixels labeled 0 are skipped.
    """
    labels = np.asarray(labels).reshape(-1)
    predictions = np.asarray(predictions).reshape(-1)
    if labels.shape != predictions.shape:
        raise MetricError(f"labels {labels.shape} and predictions {predictions.shape} differ")
    K = num_classes
    if labels.size and (labels.min() < 0 or labels.max() > K):
        raise MetricError(f"labels outside 0..{K}")
    valid = labels != IGNORE_INDEX
    p = predictions[valid].astype(np.int64)
    if p.size and (p.min() < 1 or p.max() > K):
        bad = p[(p < 1) | (p > K)][0]
        raise MetricError(f"prediction {bad} outside 1..{K}")
    t = labels[valid].astype(np.int64)
    return np.bincount((t - 1) * K + (p - 1), minlength=K * K).reshape(K, K).astype(np.int64)


def predict_classes(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis of (B, K, H, W) logits, as labels 1..K.

    Ties go to the lowest class index.
    """
    return np.argmax(logits, axis=1).astype(np.int64) + 1


def _check(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise MetricError(f"confusion matrix must be square, got {cm.shape}")
    if np.any(cm < 0):
        raise MetricError("confusion matrix has negative entries")
    if cm.sum() == 0:
        raise MetricError("confusion matrix is empty")
    return cm


def _ratio(a: int, b: int) -> Fraction:
    return Fraction(a, b) if b else Fraction(0)


def _per_class(cm: np.ndarray):
    tp = [int(v) for v in np.diag(cm)]
    pred = [int(v) for v in cm.sum(axis=0)]
    support = [int(v) for v in cm.sum(axis=1)]
    prec = [_ratio(t, p) for t, p in zip(tp, pred)]
    rec = [_ratio(t, s) for t, s in zip(tp, support)]
    f1 = [2 * p * r / (p + r) if p + r else Fraction(0) for p, r in zip(prec, rec)]
    return tp, pred, support, prec, rec, f1


def _averages(values, support):
    present = [i for i, s in enumerate(support) if s > 0]
    macro = sum((values[i] for i in present), Fraction(0)) / len(present)
    weighted = sum((values[i] * support[i] for i in present), Fraction(0)) / sum(support)
    return macro, weighted


def precision_recall_f1(cm, averaging: str = "macro") -> tuple[float, float, float]:
    cm = _check(cm)
    tp, pred, support, prec, rec, f1 = _per_class(cm)
    if averaging == "micro":
        p = _ratio(sum(tp), sum(pred))
        r = _ratio(sum(tp), sum(support))
        f = 2 * p * r / (p + r) if p + r else Fraction(0)
        return float(p), float(r), float(f)
    if averaging not in ("macro", "weighted"):
        raise MetricError(f"unknown averaging {averaging!r}")
    idx = 0 if averaging == "macro" else 1
    return tuple(float(_averages(v, support)[idx]) for v in (prec, rec, f1))


def per_class_scores(cm) -> dict[str, list[float]]:
    cm = _check(cm)
    tp, pred, support, prec, rec, f1 = _per_class(cm)
    iou = [_ratio(t, p + s - t) for t, p, s in zip(tp, pred, support)]
    return {
        "precision": [float(v) for v in prec],
        "recall": [float(v) for v in rec],
        "f1": [float(v) for v in f1],
        "iou": [float(v) for v in iou],
        "support": support,
    }


def iou(cm) -> float:
    """Mean IoU over classes with TP + FP + FN > 0."""
    cm = _check(cm)
    tp, pred, support, *_ = _per_class(cm)
    vals = [Fraction(t, p + s - t) for t, p, s in zip(tp, pred, support) if p + s - t > 0]
    return float(sum(vals, Fraction(0)) / len(vals))


def subset_accuracy(cm) -> float:
    cm = _check(cm)
    return float(Fraction(int(np.trace(cm)), int(cm.sum())))


def metric_report(cm) -> MetricReport:
    mp, mr, mf = precision_recall_f1(cm, "macro")
    up, ur, uf = precision_recall_f1(cm, "micro")
    wp, wr, wf = precision_recall_f1(cm, "weighted")
    return MetricReport(
        macro_precision=mp, micro_precision=up, weighted_precision=wp,
        macro_recall=mr, micro_recall=ur, weighted_recall=wr,
        macro_f1=mf, micro_f1=uf, weighted_f1=wf,
        subset_accuracy=subset_accuracy(cm), iou=iou(cm),
    )


def confusion_csv(cm, names=None) -> str:
    cm = np.asarray(cm)
    names = names or [str(i + 1) for i in range(cm.shape[0])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred", *names])
    for name, row in zip(names, cm):
        w.writerow([name, *(int(v) for v in row)])
    return buf.getvalue()
