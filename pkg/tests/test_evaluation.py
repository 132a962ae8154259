import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nse.dataset import InteractionDataset
from nse.evaluation import (
    EvaluationError,
    evaluate_all,
    full_rank,
    ndcg_at_k,
    recall_at_k,
)

from conftest import random_dataset


def oracle_metrics(user_vecs, item_vecs, ds, K):
    """Independent recomputation: python sort over (score desc, id asc)."""
    recalls, ndcgs = [], []
    for u in range(ds.num_users):
        test = set(ds.user_test_positives[u].tolist())
        if not test:
            continue
        train = set(ds.user_train_positives[u].tolist())
        ranked = sorted((i for i in range(ds.num_items) if i not in train),
                        key=lambda i: (-float(np.dot(user_vecs[u], item_vecs[i])), i))[:K]
        hits = [1 if i in test else 0 for i in ranked]
        recalls.append(sum(hits) / len(test))
        dcg = sum(h / math.log2(r + 2) for r, h in enumerate(hits))
        idcg = sum(1 / math.log2(r + 2) for r in range(min(K, len(test))))
        ndcgs.append(dcg / idcg)
    return sum(recalls) / len(recalls), sum(ndcgs) / len(ndcgs)


# --------------------------------------------------------------- top-K

def one_user(num_items, train=(), test=(0,)):
    return InteractionDataset.from_edges([(0, i) for i in train] or [(1, num_items - 1)],
                                         [(0, i) for i in test], 2, num_items)


def test_topk_read_off():
    ds = one_user(3)
    top = full_rank(0, np.ones((2, 1)), np.array([[0.1], [0.9], [0.5]]), ds, K=2)
    assert top.tolist() == [1, 2]


def test_topk_exhaustive():
    ds = one_user(4, train=[3])
    top = full_rank(0, np.ones((2, 1)), np.array([[0.1], [0.9], [0.5], [5.0]]), ds, K=10)
    assert top.tolist() == [1, 2, 0]


def test_topk_ties_lowest_id():
    ds = one_user(5)
    top = full_rank(0, np.ones((2, 1)), np.ones((5, 1)), ds, K=3)
    assert top.tolist() == [0, 1, 2]


def test_topk_full_sort_oracle(rng):
    for _ in range(20):
        ds = one_user(50, train=rng.choice(50, 7, replace=False).tolist(), test=[])
        items = rng.normal(size=(50, 4)).round(1)  # rounding creates ties
        u = rng.normal(size=(2, 4))
        train = set(ds.user_train_positives[0].tolist())
        expected = sorted((i for i in range(50) if i not in train), key=lambda i: (-float(items[i] @ u[0]), i))
        assert full_rank(0, u, items, ds, K=15).tolist() == expected[:15]


def test_masking_never_returns_train_items(rng):
    ds = random_dataset(rng, 20, 40, 300, test_edges=40)
    uv, iv = rng.normal(size=(20, 3)), rng.normal(size=(40, 3))
    for u in range(20):
        top = full_rank(u, uv, iv, ds, K=20)
        assert not set(top.tolist()) & set(ds.user_train_positives[u].tolist())


def test_bad_k():
    with pytest.raises(ValueError):
        full_rank(0, np.ones((2, 1)), np.ones((3, 1)), one_user(3), K=0)


# ---------------------------------------------------------------- metrics

def test_recall_examples():
    assert recall_at_k([1, 2, 3], {1, 2}) == 1.0
    assert recall_at_k([4, 5], {1, 2}) == 0.0
    assert recall_at_k([1, 9, 3, 8], {1, 2, 3, 4, 5}) == 0.4


def test_ndcg_examples():
    assert ndcg_at_k([7] + list(range(100, 119)), {7}, 20) == 1.0
    assert ndcg_at_k([0, 7], {7}, 20) == pytest.approx(1 / math.log2(3), abs=1e-15)
    assert ndcg_at_k([0, 7], {7}, 20) == pytest.approx(0.630930, abs=1e-6)
    assert ndcg_at_k([0, 1], {7}, 20) == 0.0


def test_empty_test_set():
    with pytest.raises(EvaluationError):
        recall_at_k([1], set())
    with pytest.raises(EvaluationError):
        ndcg_at_k([1], set())


@given(st.permutations(list(range(12))), st.sets(st.integers(0, 11), min_size=1, max_size=6))
@settings(max_examples=200, deadline=None)
def test_metric_bounds_and_monotonicity(ranking, test):
    rec = [recall_at_k(ranking[:k], test) for k in range(1, 13)]
    assert all(b >= a for a, b in zip(rec, rec[1:]))
    nd = [ndcg_at_k(ranking[:k], test, k) for k in range(1, 13)]
    assert all(0.0 <= x <= 1.0 + 1e-15 for x in nd)
    # the ideal DCG stops growing once K reaches |test|; from there NDCG is monotone
    tail = nd[len(test) - 1:]
    assert all(b >= a - 1e-15 for a, b in zip(tail, tail[1:]))
    for k in range(1, 13):
        perfect = set(ranking[:min(k, len(test))]) <= test
        assert (abs(nd[k - 1] - 1.0) < 1e-12) == perfect


def test_ndcg_not_monotone_below_test_size():
    # with a truncated ideal DCG, adding a miss below |test| lowers the score
    assert ndcg_at_k([0, 9], {0, 1}, 1) == 1.0
    assert ndcg_at_k([0, 9], {0, 1}, 2) < 1.0


# -------------------------------------------------------------- evaluate_all

def test_single_user_report():
    ds = InteractionDataset.from_edges([(0, 0)], [(0, 2)], 1, 3)
    rep = evaluate_all(np.ones((1, 1)), np.array([[3.0], [2.0], [1.0]]), ds, K=1)
    assert rep.users_evaluated == 1
    assert (rep.recall, rep.ndcg) == rep.per_user[0] == (0.0, 0.0)


def test_two_user_average():
    ds = InteractionDataset.from_edges([(0, 0), (1, 0)], [(0, 1), (1, 2)], 2, 3)
    rep = evaluate_all(np.ones((2, 1)), np.array([[0.0], [2.0], [1.0]]), ds, K=1)
    assert rep.recall == 0.5


def test_users_without_test_items_skipped():
    ds = InteractionDataset.from_edges([(0, 0), (1, 0), (2, 1)], [(0, 1)], 3, 3)
    rep = evaluate_all(np.ones((3, 1)), np.array([[0.0], [2.0], [1.0]]), ds, K=1)
    assert rep.users_evaluated == 1 and rep.recall == 1.0


def test_no_test_users():
    with pytest.raises(EvaluationError):
        evaluate_all(np.ones((1, 1)), np.ones((2, 1)), InteractionDataset.from_edges([(0, 0)], [], 1, 2))


def test_random_instances_match_oracle():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        ds = random_dataset(rng, 20, 60, 500, test_edges=80)
        uv, iv = rng.normal(size=(20, 5)), rng.normal(size=(60, 5))
        rep = evaluate_all(uv, iv, ds, K=10, chunk=7)
        r, n = oracle_metrics(uv, iv, ds, 10)
        assert abs(rep.recall - r) <= 1e-12 and abs(rep.ndcg - n) <= 1e-12


def test_permutation_invariance(rng):
    ds = random_dataset(rng, 20, 40, 300, test_edges=50)
    uv, iv = rng.normal(size=(20, 4)), rng.normal(size=(40, 4))
    perm = rng.permutation(40)  # new id of old item i is perm[i]
    edges = lambda e: np.column_stack([e[:, 0], perm[e[:, 1]]])
    pds = InteractionDataset.from_edges(edges(ds.train_edges), edges(ds.test_edges), 20, 40)
    piv = np.empty_like(iv)
    piv[perm] = iv
    a, b = evaluate_all(uv, iv, ds), evaluate_all(uv, piv, pds)
    assert a.recall == pytest.approx(b.recall, abs=1e-15) and a.ndcg == pytest.approx(b.ndcg, abs=1e-15)


def test_report_outputs(tmp_path, rng):
    ds = random_dataset(rng, 10, 20, 80, test_edges=15)
    rep = evaluate_all(rng.normal(size=(10, 3)), rng.normal(size=(20, 3)), ds, meta={"seed": 3, "sampler": "dins"})
    rec = rep.as_record()
    assert {"K", "recall", "ndcg", "users_evaluated", "seed", "sampler"} <= set(rec)
    rep.write_per_user_csv(tmp_path / "u.csv")
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "user,recall@20,ndcg@20" and len(lines) == rep.users_evaluated + 1
