"""Binary-classification metric suite.

AUC uses pairwise counting with half credit for tied scores; every other
metric derives from the confusion counts after the flip/threshold
decision rule is applied.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ContractError


def apply_decision(probs: np.ndarray, threshold: float = 0.5, flip: bool = False) -> np.ndarray:
    """Binary predictions: flip first (p -> 1-p), then compare >= threshold."""
    p = np.asarray(probs, dtype=np.float64)
    if flip:
        p = 1.0 - p
    return (p >= threshold).astype(np.int64)


def confusion_counts(preds: np.ndarray, labels: np.ndarray):
    preds = np.asarray(preds).astype(np.int64)
    labels = np.asarray(labels).astype(np.int64)
    tp = int(np.sum((preds == 1) & (labels == 1)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    return tp, tn, fp, fn


def auc_pairwise(scores: np.ndarray, labels: np.ndarray):
    """Probability a random positive outranks a random negative; ties get
    0.5 credit.  None when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        return None
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f1_per_class(tp, tn, fp, fn):
    """(f1 of the positive/high class, f1 of the negative/low class)."""
    prec_pos = tp / (tp + fp) if tp + fp else 0.0
    rec_pos = tp / (tp + fn) if tp + fn else 0.0
    prec_neg = tn / (tn + fn) if tn + fn else 0.0
    rec_neg = tn / (tn + fp) if tn + fp else 0.0
    return _f1(prec_pos, rec_pos), _f1(prec_neg, rec_neg)


@dataclass
class MetricsReport:
    accuracy: float
    auc: float | None
    f1_positive: float
    f1_negative: float
    f1_macro: float
    tp: int
    tn: int
    fp: int
    fn: int
    threshold: float
    flip: bool
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(probs, labels, threshold: float = 0.5, flip: bool = False) -> MetricsReport:
    """Full report for one evaluation set.

    AUC is computed on the flip-adjusted scores (ranking only); it is
    None when the labels are single-class rather than imputed as 0.5.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if probs.size == 0:
        raise ContractError("compute_metrics: empty input")
    if probs.shape != labels.shape:
        raise ContractError("compute_metrics: probs/labels length mismatch")
    adjusted = 1.0 - probs if flip else probs
    preds = (adjusted >= threshold).astype(np.int64)
    tp, tn, fp, fn = confusion_counts(preds, labels)
    acc = (tp + tn) / probs.size
    f1_pos, f1_neg = f1_per_class(tp, tn, fp, fn)
    return MetricsReport(
        accuracy=float(acc),
        auc=auc_pairwise(adjusted, labels),
        f1_positive=f1_pos,
        f1_negative=f1_neg,
        f1_macro=0.5 * (f1_pos + f1_neg),
        tp=tp,
        tn=tn,
        fp=fp,
        fn=fn,
        threshold=float(threshold),
        flip=bool(flip),
        n=int(probs.size),
    )
