"""Ranking/classification metrics on the unbiased test grid.

Conventions (the source papers leave them open, so they are pinned here):
AUC is computed globally over all test pairs with ties counting 0.5;
NDCG@K uses binary gains, discount 1/log2(rank+1), ties broken by item
index, and users without test positives are excluded; F1@K is the harmonic
mean of precision@K (hits/K) and recall@K, 0 when both are 0.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Sequence

import numpy as np

from .errors import ConfigError, UnavailableError


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    boundaries = np.flatnonzero(np.diff(sorted_vals) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [values.size]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e + 1)
    return ranks


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties 0.5)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UnavailableError("AUC needs both classes in the labels")
    ranks = _average_ranks(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _ranking(scores: np.ndarray) -> np.ndarray:
    # Descending score, ascending item index on ties.
    return np.lexsort((np.arange(scores.size), -scores))


def ndcg_at_k(user_scores: Sequence[np.ndarray], user_labels: Sequence[np.ndarray],
              k: int) -> float:
    """Mean over eligible users of DCG@k / IDCG@k with binary gains."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    totals = []
    for scores, labels in zip(user_scores, user_labels):
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64)
        n_pos = int(labels.sum())
        if n_pos == 0:
            continue
        top = _ranking(scores)[:k]
        dcg = float((labels[top] * discounts[:top.size]).sum())
        idcg = float(discounts[:min(k, n_pos)].sum())
        totals.append(dcg / idcg)
    if not totals:
        raise UnavailableError("no user has a positive test label")
    return float(np.mean(totals))


def f1_at_k(user_scores: Sequence[np.ndarray], user_labels: Sequence[np.ndarray],
            k: int) -> float:
    """Mean over eligible users of the harmonic mean of precision@k and recall@k."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    totals = []
    for scores, labels in zip(user_scores, user_labels):
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64)
        n_pos = int(labels.sum())
        if n_pos == 0:
            continue
        top = _ranking(scores)[:k]
        hits = float(labels[top].sum())
        precision = hits / k
        recall = hits / n_pos
        if precision + recall == 0.0:
            totals.append(0.0)
        else:
            totals.append(2.0 * precision * recall / (precision + recall))
    if not totals:
        raise UnavailableError("no user has a positive test label")
    return float(np.mean(totals))


@dataclasses.dataclass(frozen=True)
class MetricReport:
    auc: float
    ndcg_at_k: float
    f1_at_k: float
    k: int
    n_eval_users: int

    def to_json(self, seed: int | None = None) -> str:
        record = {"auc": self.auc, f"ndcg@{self.k}": self.ndcg_at_k,
                  f"f1@{self.k}": self.f1_at_k, "k": self.k,
                  "n_eval_users": self.n_eval_users}
        if seed is not None:
            record["seed"] = seed
        return json.dumps(record)
