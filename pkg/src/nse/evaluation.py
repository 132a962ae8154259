"""Full-ranking top-K evaluation (Recall@K, NDCG@K)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import InteractionDataset


class EvaluationError(ValueError):
    pass


def recall_at_k(topk, test_set) -> float:
    test_set = set(int(i) for i in test_set)
    if not test_set:
        raise EvaluationError("empty test set")
    hits = sum(1 for i in topk if int(i) in test_set)
    return hits / len(test_set)


def _idcg(n: int) -> float:
    return sum(1.0 / math.log2(p + 1) for p in range(1, n + 1))


def ndcg_at_k(topk, test_set, K: int | None = None) -> float:
    """Binary-relevance NDCG. ``K`` defaults to the list length."""
    test_set = set(int(i) for i in test_set)
    if not test_set:
        raise EvaluationError("empty test set")
    K = len(topk) if K is None else K
    dcg = sum(1.0 / math.log2(p + 1) for p, i in enumerate(topk[:K], start=1) if int(i) in test_set)
    return dcg / _idcg(min(K, len(test_set)))


def _topk_row(scores: np.ndarray, K: int) -> np.ndarray:
    """Indices of the K largest scores, ties to lowest index; ``-inf`` marks masked items."""
    eligible = scores > -np.inf
    n_elig = int(eligible.sum())
    k = min(K, n_elig)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if k < len(scores):
        thresh = np.partition(scores, len(scores) - k)[len(scores) - k]
        cand = np.flatnonzero((scores >= thresh) & eligible)
    else:
        cand = np.flatnonzero(eligible)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]]


def _masked_scores(user_vecs, item_vecs, users, dataset):
    scores = user_vecs[users] @ item_vecs.T
    for row, u in enumerate(users):
        scores[row, dataset.user_train_positives[u]] = -np.inf
    return scores


def full_rank(user: int, user_vecs, item_vecs, dataset: InteractionDataset, K: int = 20) -> np.ndarray:
    """Top-K items for ``user`` among items outside its train positives."""
    if K < 1:
        raise ValueError("K must be >= 1")
    return _topk_row(_masked_scores(user_vecs, item_vecs, [user], dataset)[0], K)


@dataclass
class MetricsReport:
    K: int
    recall: float
    ndcg: float
    users_evaluated: int
    per_user: dict = field(default_factory=dict, repr=False)
    meta: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        rec = {"K": self.K, "recall": self.recall, "ndcg": self.ndcg, "users_evaluated": self.users_evaluated}
        rec.update(self.meta)
        return rec

    def to_json(self) -> str:
        return json.dumps(self.as_record(), sort_keys=True)

    def write_per_user_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", f"recall@{self.K}", f"ndcg@{self.K}"])
            for u in sorted(self.per_user):
                r, n = self.per_user[u]
                w.writerow([u, repr(r), repr(n)])


def evaluate_all(user_vecs, item_vecs, dataset: InteractionDataset, K: int = 20,
                 chunk: int = 1024, meta: dict | None = None) -> MetricsReport:
    """Average Recall@K / NDCG@K over users that have test items.

    ``user_vecs`` / ``item_vecs`` are the pooled final representations.
    """
    users = dataset.test_users()
    if not len(users):
        raise EvaluationError("no user has test interactions")
    per_user = {}
    for lo in range(0, len(users), chunk):
        block = users[lo:lo + chunk]
        scores = _masked_scores(user_vecs, item_vecs, block, dataset)
        for row, u in enumerate(block):
            top = _topk_row(scores[row], K)
            test = dataset.user_test_positives[u]
            per_user[int(u)] = (recall_at_k(top, test), ndcg_at_k(top, test, K))
    recall = math.fsum(r for r, _ in per_user.values()) / len(per_user)
    ndcg = math.fsum(n for _, n in per_user.values()) / len(per_user)
    return MetricsReport(K, recall, ndcg, len(per_user), per_user, dict(meta or {}))


def evaluate_stack(stack, dataset, K=20, **kw) -> MetricsReport:
    return evaluate_all(stack.pooled_users(), stack.pooled_items(), dataset, K, **kw)
