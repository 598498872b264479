"""Confusion counts and the binary classification metric suite."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(probabilities, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Predict positive when ``probability >= threshold``."""
    p = np.asarray(probabilities, dtype=float)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ValueError("probabilities and labels are not aligned")
    pred = p >= threshold
    return ConfusionMatrix(
        tp=int(np.sum(pred & y)),
        tn=int(np.sum(~pred & ~y)),
        fp=int(np.sum(pred & ~y)),
        fn=int(np.sum(~pred & y)),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def _f1(tp: int, fp: int, fn: int) -> float:
    return _ratio(2 * tp, 2 * tp + fp + fn)


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean of sensitivity and specificity; an absent class contributes 0."""
    return (_ratio(cm.tp, cm.tp + cm.fn) + _ratio(cm.tn, cm.tn + cm.fp)) / 2


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for tied scores. NaN for a single class."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Area under the precision-recall curve by step interpolation.

    Equal scores form a single threshold. Each recall increment is weighted
    by the precision reached at that threshold (no linear interpolation).
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        return float("nan")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


@dataclass(frozen=True)
class MetricBundle:
    balanced_accuracy: float
    auc: float
    auc_pr: float
    f1: float
    f1_macro: float
    sensitivity: float
    specificity: float
    precision: float
    recall: float
    confusion: ConfusionMatrix

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.to_dict()
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricBundle":
        doc = dict(doc)
        doc["confusion"] = ConfusionMatrix(**doc["confusion"])
        return cls(**{k: (float("nan") if v is None else v) if k != "confusion" else v for k, v in doc.items()})


SCALAR_METRICS = (
    "balanced_accuracy",
    "auc",
    "auc_pr",
    "f1",
    "f1_macro",
    "sensitivity",
    "specificity",
    "precision",
    "recall",
)


def metrics(cm: ConfusionMatrix, probabilities=None, labels=None) -> MetricBundle:
    """All metrics from a confusion matrix plus (optionally) the raw scores.

    Threshold metrics come from ``cm`` alone; AUC and AUC-PR need the scores
    and are NaN without them or when only one class is present.
    """
    sens = _ratio(cm.tp, cm.tp + cm.fn)
    spec = _ratio(cm.tn, cm.tn + cm.fp)
    f1_pos = _f1(cm.tp, cm.fp, cm.fn)
    f1_neg = _f1(cm.tn, cm.fn, cm.fp)
    auc = ap = float("nan")
    if probabilities is not None and labels is not None:
        auc = roc_auc(probabilities, labels)
        ap = auc_pr(probabilities, labels)
    return MetricBundle(
        balanced_accuracy=(sens + spec) / 2,
        auc=auc,
        auc_pr=ap,
        f1=f1_pos,
        f1_macro=(f1_pos + f1_neg) / 2,
        sensitivity=sens,
        specificity=spec,
        precision=_ratio(cm.tp, cm.tp + cm.fp),
        recall=sens,
        confusion=cm,
    )
