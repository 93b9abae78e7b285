"""Ranking metrics.

``bipartite_risk`` counts ties as mis-orderings (``s_neg >= s_pos``);
``auc`` uses the usual half-credit for ties, so on tied scores the two do
not sum to one.
"""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    return scores[labels == 1], scores[labels == 0]


def bipartite_risk(scores, labels):
    """Fraction of (positive, negative) pairs with ``s_neg >= s_pos``; 0 when
    either class is empty."""
    pos, neg = _split(scores, labels)
    if pos.size == 0 or neg.size == 0:
        return 0.0
    neg_sorted = np.sort(neg)
    # negatives with score >= each positive
    bad = neg.size - np.searchsorted(neg_sorted, pos, side="left")
    return float(bad.sum() / (pos.size * neg.size))


def auc(scores, labels):
    """Mann-Whitney AUC, ties counted 0.5.  NaN when a class is empty."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = _split(scores, labels)
    n_pos, n_neg = pos.size, neg.size
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def grouped_auc(score_list, label_list):
    """Mean of per-request AUCs over requests holding both classes."""
    vals = [auc(s, y) for s, y in zip(score_list, label_list)]
    vals = [v for v in vals if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def mean_risk(score_list, label_list):
    return float(np.mean([bipartite_risk(s, y) for s, y in zip(score_list, label_list)]))
