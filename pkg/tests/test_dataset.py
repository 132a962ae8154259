import logging
import os

import numpy as np
import pytest

from nse.dataset import (
    DatasetError,
    InteractionDataset,
    ParseError,
    build_graph,
    load_interactions,
    popularity_distribution,
    save_interactions,
    validation_split,
)
from nse.samplers import popularity_sample

from conftest import random_dataset, write_split


def test_load_trivial_file(tmp_path):
    train = write_split(tmp_path / "train.txt", ["0 1 2", "1 2"])
    test = write_split(tmp_path / "test.txt", [])
    ds = load_interactions(train, test)
    assert (ds.num_users, ds.num_items, ds.num_train) == (2, 3, 3)
    assert ds.user_train_positives[0].tolist() == [1, 2]


def test_id_space_covers_both_splits(tmp_path):
    train = write_split(tmp_path / "train.txt", ["0 1"])
    test = write_split(tmp_path / "test.txt", ["4 7"])
    ds = load_interactions(train, test)
    assert (ds.num_users, ds.num_items) == (5, 8)


def test_parse_error_names_line(tmp_path):
    train = write_split(tmp_path / "train.txt", ["0 x 2"])
    test = write_split(tmp_path / "test.txt", [])
    with pytest.raises(ParseError) as exc:
        load_interactions(train, test)
    assert exc.value.lineno == 1
    assert ":1:" in str(exc.value)


def test_parse_error_later_line(tmp_path):
    train = write_split(tmp_path / "train.txt", ["0 1", "", "1 2.5"])
    with pytest.raises(ParseError, match=":3:"):
        load_interactions(train, write_split(tmp_path / "test.txt", []))


def test_empty_train_rejected(tmp_path):
    train = write_split(tmp_path / "train.txt", ["3"])
    test = write_split(tmp_path / "test.txt", ["0 1"])
    with pytest.raises(DatasetError):
        load_interactions(train, test)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.txt"):
        load_interactions(tmp_path / "nope.txt", tmp_path / "test.txt")


def test_crlf_and_repeated_user_lines(tmp_path):
    (tmp_path / "train.txt").write_bytes(b"0 1 2\r\n1 0\r\n0 3\r\n")
    write_split(tmp_path / "test.txt", ["1 3"])
    ds = load_interactions(tmp_path / "train.txt", tmp_path / "test.txt")
    assert ds.user_train_positives[0].tolist() == [1, 2, 3]
    assert ds.user_test_positives[1].tolist() == [3]


def test_duplicates_dropped_with_warning(tmp_path, caplog):
    train = write_split(tmp_path / "train.txt", ["0 1 1 2", "0 2"])
    test = write_split(tmp_path / "test.txt", [])
    with caplog.at_level(logging.WARNING):
        ds = load_interactions(train, test)
    assert ds.num_train == 2
    assert "duplicate" in caplog.text


def test_split_overlap_rejected():
    with pytest.raises(DatasetError, match="both splits"):
        InteractionDataset.from_edges([(0, 1)], [(0, 1)])


def test_strict_counts():
    with pytest.raises(DatasetError):
        InteractionDataset.from_edges([(0, 5)], [], num_users=1, num_items=3, strict=True)
    ds = InteractionDataset.from_edges([(0, 5)], [], num_users=1, num_items=3)
    assert ds.num_items == 6


def test_round_trip(tmp_path, rng):
    ds = random_dataset(rng, 30, 40, 300, test_edges=40)
    save_interactions(ds, tmp_path)
    back = load_interactions(tmp_path / "train.txt", tmp_path / "test.txt")
    assert np.array_equal(back.train_edges, ds.train_edges)
    assert np.array_equal(back.test_edges, ds.test_edges)


def test_positive_sets_match_brute_force(rng):
    ds = random_dataset(rng, 50, 80, 5000, test_edges=500)
    for u in range(ds.num_users):
        expected = sorted({i for uu, i in ds.train_edges.tolist() if uu == u})
        assert ds.user_train_positives[u].tolist() == expected
        flags = ds.is_train_positive(np.full(ds.num_items, u), np.arange(ds.num_items))
        assert np.flatnonzero(flags).tolist() == expected


def test_is_train_positive_sparse_path(rng, monkeypatch):
    import nse.dataset as mod

    ds = random_dataset(rng, 20, 30, 200)
    users = rng.integers(0, 20, 500)
    items = rng.integers(0, 30, 500)
    dense = ds.is_train_positive(users, items)
    monkeypatch.setattr(mod, "DENSE_LOOKUP_LIMIT", 0)
    fresh = InteractionDataset.from_edges(ds.train_edges, [], 20, 30)
    assert np.array_equal(fresh.is_train_positive(users, items), dense)


# -------------------------------------------------------------------- graph

def test_graph_hand_computation():
    ds = InteractionDataset.from_edges([(0, 0), (0, 1), (1, 1)])
    g = build_graph(ds)
    assert g.user_neighbors(0).tolist() == [0, 1]
    assert g.user_neighbors(1).tolist() == [1]
    assert g.coefficient(0, 1) == pytest.approx(0.5, abs=1e-12)
    assert g.coefficient(0, 0) == pytest.approx(1 / np.sqrt(2), abs=1e-12)
    assert g.coefficient(1, 0) == 0.0


def test_graph_single_edge():
    g = build_graph(InteractionDataset.from_edges([(0, 0)]))
    assert g.coefficient(0, 0) == 1.0


def test_graph_isolated_nodes():
    ds = InteractionDataset.from_edges([(0, 0)], [(2, 3)])
    g = build_graph(ds)
    assert len(g.user_neighbors(2)) == 0
    assert len(g.item_neighbors(3)) == 0


def test_graph_transpose_brute_force(rng):
    ds = random_dataset(rng, 20, 25, 100)
    g = build_graph(ds)
    edges = set(map(tuple, ds.train_edges.tolist()))
    du = np.bincount(ds.train_edges[:, 0], minlength=20)
    di = np.bincount(ds.train_edges[:, 1], minlength=25)
    for u in range(20):
        for i in range(25):
            in_u = i in g.user_neighbors(u)
            in_i = u in g.item_neighbors(i)
            assert in_u == in_i == ((u, i) in edges)
            if in_u:
                assert abs(g.coefficient(u, i) - 1 / np.sqrt(du[u] * di[i])) < 1e-12
    assert np.allclose(g.norm_adj.toarray().T, g.norm_adj_t.toarray(), atol=0)


# --------------------------------------------------------------- popularity

def test_popularity_probabilities():
    ds = InteractionDataset.from_edges([(0, 0), (1, 0), (0, 1), (2, 2)])
    table = popularity_distribution(ds)
    assert np.allclose(table.probabilities, [0.5, 0.25, 0.25])
    assert table.cumulative_weights[-1] == table.total == 4
    assert np.all(np.diff(table.cumulative_weights) >= 0)


def test_popularity_uniform():
    ds = InteractionDataset.from_edges([(0, 0), (1, 1), (2, 2), (3, 3)])
    assert np.allclose(popularity_distribution(ds).probabilities, 0.25)


def test_popularity_zero_weight_items():
    ds = InteractionDataset.from_edges([(0, 2)], [(1, 0)])
    table = popularity_distribution(ds)
    assert table.item_weights.tolist() == [0.0, 0.0, 1.0]


def test_popularity_monte_carlo_ratio():
    # item 0 seen 3 times, item 1 once; user 4 has no positives
    ds = InteractionDataset.from_edges([(0, 0), (1, 0), (2, 0), (3, 1)], [(4, 0)])
    table = popularity_distribution(ds)
    rng = np.random.default_rng(0)
    draws = np.array([popularity_sample(4, table, ds, rng) for _ in range(10_000)])
    ratio = np.sum(draws == 0) / np.sum(draws == 1)
    assert abs(ratio / 3.0 - 1.0) < 0.05


@pytest.mark.skipif("YELP2018_DIR" not in os.environ,
                    reason="set YELP2018_DIR to a directory with the public Yelp2018 split")
def test_yelp2018_statistics():
    root = os.environ["YELP2018_DIR"]
    ds = load_interactions(os.path.join(root, "train.txt"), os.path.join(root, "test.txt"))
    assert (ds.num_users, ds.num_items) == (31_668, 38_048)
    assert ds.num_train + len(ds.test_edges) == 1_561_406


def test_validation_split(rng):
    ds = random_dataset(rng, 30, 50, 600, test_edges=40)
    val = validation_split(ds, per_user=2, seed=1)
    assert (val.num_users, val.num_items) == (ds.num_users, ds.num_items)
    assert val.num_train + len(val.test_edges) == ds.num_train
    for u in range(30):
        n = len(ds.user_train_positives[u])
        assert len(val.user_test_positives[u]) == (2 if n > 2 else 0)
        union = set(val.user_train_positives[u].tolist()) | set(val.user_test_positives[u].tolist())
        assert union == set(ds.user_train_positives[u].tolist())
