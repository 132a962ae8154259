"""Interaction data: loading, the user-item bipartite graph and popularity tables."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

# membership tests use a dense boolean matrix up to this many cells
DENSE_LOOKUP_LIMIT = 50_000_000


class DatasetError(ValueError):
    """Malformed or invalid interaction data."""


class ParseError(DatasetError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


def _dedupe_edges(edges: np.ndarray) -> np.ndarray:
    if len(edges) == 0:
        return edges.reshape(0, 2)
    # lexicographic (user, item) order, duplicates removed
    return np.unique(edges, axis=0)


def _positive_sets(edges: np.ndarray, num_users: int) -> list[np.ndarray]:
    out = [np.empty(0, dtype=np.int64) for _ in range(num_users)]
    if len(edges) == 0:
        return out
    users = edges[:, 0]
    bounds = np.searchsorted(users, np.arange(num_users + 1))
    for u in range(num_users):
        lo, hi = bounds[u], bounds[u + 1]
        if hi > lo:
            out[u] = edges[lo:hi, 1].copy()
    return out


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    num_users: int
    num_items: int
    train_edges: np.ndarray
    test_edges: np.ndarray
    user_train_positives: list = field(repr=False)
    user_test_positives: list = field(repr=False)

    @classmethod
    def from_edges(cls, train_edges, test_edges=(), num_users=None, num_items=None,
                   strict=False) -> "InteractionDataset":
        """Validate and index raw ``(user, item)`` pairs.

        Duplicate pairs inside a split are dropped with a warning. When
        ``strict`` is set, explicit counts must cover every id seen.
        """
        train = np.asarray(train_edges, dtype=np.int64).reshape(-1, 2)
        test = np.asarray(test_edges, dtype=np.int64).reshape(-1, 2)
        if len(train) == 0:
            raise DatasetError("train split is empty")
        both = np.concatenate([train, test])
        if (both < 0).any():
            raise DatasetError("negative ids are not allowed")
        seen_users = int(both[:, 0].max()) + 1
        seen_items = int(both[:, 1].max()) + 1
        if num_users is None:
            num_users = seen_users
        elif seen_users > num_users:
            if strict:
                raise DatasetError(f"user id {seen_users - 1} >= declared num_users {num_users}")
            num_users = seen_users
        if num_items is None:
            num_items = seen_items
        elif seen_items > num_items:
            if strict:
                raise DatasetError(f"item id {seen_items - 1} >= declared num_items {num_items}")
            num_items = seen_items

        for name, arr in (("train", train), ("test", test)):
            n = len(_dedupe_edges(arr))
            if n < len(arr):
                log.warning("dropped %d duplicate %s interactions", len(arr) - n, name)
        train = _dedupe_edges(train)
        test = _dedupe_edges(test)

        key_train = train[:, 0] * num_items + train[:, 1]
        key_test = test[:, 0] * num_items + test[:, 1]
        overlap = np.intersect1d(key_train, key_test)
        if len(overlap):
            u, i = divmod(int(overlap[0]), num_items)
            raise DatasetError(f"{len(overlap)} pairs appear in both splits, e.g. ({u}, {i})")

        return cls(
            num_users=int(num_users),
            num_items=int(num_items),
            train_edges=train,
            test_edges=test,
            user_train_positives=_positive_sets(train, num_users),
            user_test_positives=_positive_sets(test, num_users),
        )

    @property
    def num_train(self) -> int:
        return len(self.train_edges)

    def train_keys(self) -> np.ndarray:
        """Sorted ``user * num_items + item`` keys of the train split."""
        keys = getattr(self, "_train_keys", None)
        if keys is None:
            keys = self.train_edges[:, 0] * self.num_items + self.train_edges[:, 1]
            object.__setattr__(self, "_train_keys", keys)
        return keys

    def is_train_positive(self, users, items) -> np.ndarray:
        if self.num_users * self.num_items <= DENSE_LOOKUP_LIMIT:
            dense = getattr(self, "_train_dense", None)
            if dense is None:
                dense = np.zeros((self.num_users, self.num_items), dtype=bool)
                dense[self.train_edges[:, 0], self.train_edges[:, 1]] = True
                object.__setattr__(self, "_train_dense", dense)
            return dense[users, items]
        keys = self.train_keys()
        q = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(keys, q)
        pos = np.minimum(pos, len(keys) - 1)
        return keys[pos] == q

    def train_degrees(self) -> np.ndarray:
        return np.array([len(p) for p in self.user_train_positives], dtype=np.int64)

    def test_users(self) -> np.ndarray:
        return np.array([u for u, p in enumerate(self.user_test_positives) if len(p)], dtype=np.int64)


def _read_split(path: Path) -> list[tuple[int, int]]:
    edges = []
    with open(path, "r", encoding="utf-8", newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            ids = []
            for tok in tokens:
                try:
                    ids.append(int(tok))
                except ValueError:
                    raise ParseError(path, lineno, f"non-integer token {tok!r}") from None
            user = ids[0]
            edges.extend((user, item) for item in ids[1:])
    return edges


def load_interactions(train_path, test_path, num_users=None, num_items=None,
                      strict=False) -> InteractionDataset:
    """Read ``uid iid iid ...`` files. A user may span several lines."""
    train_path, test_path = Path(train_path), Path(test_path)
    for p in (train_path, test_path):
        if not p.is_file():
            raise FileNotFoundError(f"interaction file not found: {p}")
    train = _read_split(train_path)
    test = _read_split(test_path)
    return InteractionDataset.from_edges(train, test, num_users, num_items, strict=strict)


def load_dir(data_dir, **kwargs) -> InteractionDataset:
    data_dir = Path(data_dir)
    return load_interactions(data_dir / "train.txt", data_dir / "test.txt", **kwargs)


def _write_split(path: Path, positives: list):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, items in enumerate(positives):
            if len(items):
                fh.write(" ".join(map(str, [u, *items.tolist()])) + "\n")


def save_interactions(dataset: InteractionDataset, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_split(out_dir / "train.txt", dataset.user_train_positives)
    _write_split(out_dir / "test.txt", dataset.user_test_positives)
    return out_dir


def validation_split(dataset: InteractionDataset, per_user: int = 1, seed: int = 0) -> InteractionDataset:
    """Hold out ``per_user`` train items of every user with more than that many
    as the evaluation split. The original test split is dropped; the id space
    is kept so models stay compatible.
    """
    rng = np.random.default_rng(seed)
    train, held = [], []
    for u, items in enumerate(dataset.user_train_positives):
        if len(items) <= per_user:
            train.extend((u, int(i)) for i in items)
            continue
        picked = set(rng.choice(items, per_user, replace=False).tolist())
        for i in items.tolist():
            (held if i in picked else train).append((u, i))
    return InteractionDataset.from_edges(train, held, dataset.num_users, dataset.num_items, strict=True)


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Train-split user-item graph with symmetric normalisation.

    ``norm_adj`` is the ``num_users x num_items`` CSR matrix whose entry
    ``(u, i)`` is ``1 / sqrt(deg(u) * deg(i))``; ``norm_adj_t`` is its
    transpose, kept in CSR for item-side propagation.
    """

    num_users: int
    num_items: int
    norm_adj: sp.csr_matrix
    norm_adj_t: sp.csr_matrix

    def user_neighbors(self, u: int) -> np.ndarray:
        a = self.norm_adj
        return a.indices[a.indptr[u]:a.indptr[u + 1]]

    def item_neighbors(self, i: int) -> np.ndarray:
        a = self.norm_adj_t
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    def coefficient(self, u: int, i: int) -> float:
        nbrs = self.user_neighbors(u)
        k = np.searchsorted(nbrs, i)
        if k < len(nbrs) and nbrs[k] == i:
            return float(self.norm_adj.data[self.norm_adj.indptr[u] + k])
        return 0.0

    @property
    def user_degrees(self) -> np.ndarray:
        return np.diff(self.norm_adj.indptr)

    @property
    def item_degrees(self) -> np.ndarray:
        return np.diff(self.norm_adj_t.indptr)


def build_graph(dataset: InteractionDataset) -> BipartiteGraph:
    edges = dataset.train_edges
    nu, ni = dataset.num_users, dataset.num_items
    users, items = edges[:, 0], edges[:, 1]
    du = np.bincount(users, minlength=nu).astype(np.float64)
    di = np.bincount(items, minlength=ni).astype(np.float64)
    coef = 1.0 / np.sqrt(du[users] * di[items])
    # edges are (user, item)-sorted already, so this is canonical CSR
    indptr = np.zeros(nu + 1, dtype=np.int64)
    np.cumsum(du.astype(np.int64), out=indptr[1:])
    adj = sp.csr_matrix((coef, items.copy(), indptr), shape=(nu, ni))
    adj_t = adj.T.tocsr()
    adj_t.sort_indices()
    return BipartiteGraph(nu, ni, adj, adj_t)


@dataclass(frozen=True, eq=False)
class PopularityTable:
    item_weights: np.ndarray
    cumulative_weights: np.ndarray

    @property
    def total(self) -> float:
        return float(self.cumulative_weights[-1])

    @property
    def probabilities(self) -> np.ndarray:
        return self.item_weights / self.total


def popularity_distribution(dataset: InteractionDataset) -> PopularityTable:
    if dataset.num_train == 0:
        raise DatasetError("train split is empty")
    counts = np.bincount(dataset.train_edges[:, 1], minlength=dataset.num_items).astype(np.float64)
    return PopularityTable(counts, np.cumsum(counts))
