"""Classification metrics: accuracy, F1, ROC AUC, confusion counts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError

DECISION_THRESHOLD = 0.5


def roc_auc(scored: Sequence[tuple]) -> float:
    """AUC = (concordant + 0.5 * tied) / (positives * negatives).

    Implemented with average ranks (Mann-Whitney U) so ties count half;
    requires both classes to be present.
    """
    scores = np.asarray([s for s, _ in scored], dtype=np.float64)
    labels = np.asarray([int(l) for _, l in scored])
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError("labels must be 0 or 1")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u_stat = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def confusion_counts(probs: Sequence[float], labels: Sequence[int],
                     threshold: float = DECISION_THRESHOLD):
    """(tp, fp, tn, fn) with the positive call being prob > threshold."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    pred = p > threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return tp, fp, tn, fn


def f1_score(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def accuracy(tp: int, fp: int, tn: int, fn: int) -> float:
    total = tp + fp + tn + fn
    return (tp + tn) / total if total else 0.0


@dataclass
class MetricsReport:
    """Evaluation summary; training commands also attach their loss curve."""

    accuracy: float
    f1: float
    auc: Optional[float]
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float = DECISION_THRESHOLD
    loss_curve: Optional[list] = field(default=None)

    @classmethod
    def from_scores(cls, probs, labels, threshold: float = DECISION_THRESHOLD,
                    auc: Optional[float] = None) -> "MetricsReport":
        tp, fp, tn, fn = confusion_counts(probs, labels, threshold)
        return cls(accuracy=accuracy(tp, fp, tn, fn), f1=f1_score(tp, fp, fn),
                   auc=auc, tp=tp, fp=fp, tn=tn, fn=fn, threshold=threshold)

    def to_json(self) -> str:
        payload = {
            "accuracy": self.accuracy,
            "f1": self.f1,
            "auc": self.auc,
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "threshold": self.threshold,
        }
        if self.loss_curve is not None:
            payload["loss_curve"] = list(self.loss_curve)
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"
