"""Ranking metrics with pinned tie conventions.

``roc_auc`` is the Mann-Whitney statistic: the fraction of
(positive, negative) pairs ranked correctly, ties counting one half. It is
computed from tied ranks, whose sums are exact in float64 for the sizes used
here, so the result is bit-identical to the brute-force pairwise count.

``pr_auc`` is average precision over the ranked list: descending scores,
ties broken by stable input order, each positive contributing
precision-at-its-rank times 1/P. Terms are summed with ``math.fsum`` so the
result does not depend on summation order.

A single-class input has no ranking to score; both metrics return NaN as the
documented "undefined" marker and ``is_defined`` tests for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

__all__ = ["Metrics", "roc_auc", "pr_auc", "accuracy", "evaluate_scores", "is_defined"]


@dataclass
class Metrics:
    accuracy: float
    roc_auc: float
    pr_auc: float

    def lines(self) -> str:
        return ("accuracy\t%r\nroc_auc\t%r\npr_auc\t%r\n"
                % (self.accuracy, self.roc_auc, self.pr_auc))


def is_defined(value: float) -> bool:
    return not math.isnan(value)


def _validated(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-d arrays")
    return s, y.astype(np.intp)


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) with ties at 1/2; NaN when one class is absent."""
    s, y = _validated(scores, labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(s, method="average")
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pr_auc(scores, labels) -> float:
    """Average precision over the stably ranked list; NaN with no positives."""
    s, y = _validated(scores, labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        return math.nan
    order = np.argsort(-s, kind="stable")
    hits = y[order] == 1
    tp = np.cumsum(hits)
    ranks = np.arange(1, s.size + 1)
    precisions = tp[hits] / ranks[hits]
    return math.fsum(precisions.tolist()) / n_pos


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of correct calls with score >= threshold read as positive."""
    s, y = _validated(scores, labels)
    predicted = (s >= threshold).astype(np.intp)
    return float((predicted == y).mean())


def evaluate_scores(scores, labels) -> Metrics:
    return Metrics(
        accuracy=accuracy(scores, labels),
        roc_auc=roc_auc(scores, labels),
        pr_auc=pr_auc(scores, labels),
    )
