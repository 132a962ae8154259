"""Embedding tables, LightGCN-style linear propagation, layer pooling and their adjoints.

MF is the ``num_layers == 0`` special case: the layer stack is just the
base tables and pooling is the identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import BipartiteGraph

POOLING_MODES = ("mean", "concat")


class ConfigurationError(ValueError):
    pass


def init_xavier(rows: int, dim: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    if rows < 1 or dim < 1:
        raise ConfigurationError(f"need rows >= 1 and dim >= 1, got {rows}x{dim}")
    bound = np.sqrt(6.0 / (rows + dim))
    return rng.uniform(-bound, bound, size=(rows, dim)).astype(dtype, copy=False)


def pooling_slots(num_layers: int, include_layer0: bool = True) -> tuple[int, ...]:
    """Layer indices that enter the pooled representation."""
    if num_layers == 0 or include_layer0:
        return tuple(range(num_layers + 1))
    return tuple(range(1, num_layers + 1))


@dataclass(eq=False)
class EmbeddingModel:
    user_table: np.ndarray
    item_table: np.ndarray
    num_layers: int = 0
    pooling: str = "mean"
    include_layer0: bool = True

    def __post_init__(self):
        if self.pooling not in POOLING_MODES:
            raise ConfigurationError(f"unknown pooling {self.pooling!r}")
        if self.num_layers < 0:
            raise ConfigurationError("num_layers must be >= 0")
        if self.user_table.ndim != 2 or self.item_table.ndim != 2:
            raise ConfigurationError("embedding tables must be 2-d")
        if self.user_table.shape[1] != self.item_table.shape[1]:
            raise ConfigurationError("user and item tables disagree on dimension")

    @classmethod
    def create(cls, num_users, num_items, dim, rng, num_layers=0, pooling="mean",
               include_layer0=True, dtype=np.float64) -> "EmbeddingModel":
        users = init_xavier(num_users, dim, rng, dtype)
        items = init_xavier(num_items, dim, rng, dtype)
        return cls(users, items, num_layers, pooling, include_layer0)

    @property
    def dim(self) -> int:
        return self.user_table.shape[1]

    @property
    def slots(self) -> tuple[int, ...]:
        return pooling_slots(self.num_layers, self.include_layer0)

    @property
    def output_dim(self) -> int:
        return self.dim * (len(self.slots) if self.pooling == "concat" else 1)

    def tables(self) -> dict[str, np.ndarray]:
        return {"user": self.user_table, "item": self.item_table}

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.user_table.copy(), self.item_table.copy(),
                              self.num_layers, self.pooling, self.include_layer0)


@dataclass(eq=False)
class LayerStack:
    """Per-layer outputs; index 0 is the base table itself."""

    user_layers: list
    item_layers: list
    pooling: str = "mean"
    slots: tuple = (0,)
    _pooled: dict = field(default_factory=dict, repr=False)

    @property
    def num_layers(self) -> int:
        return len(self.user_layers) - 1

    @property
    def dim(self) -> int:
        return self.user_layers[0].shape[1]

    def pooled_users(self) -> np.ndarray:
        if "user" not in self._pooled:
            self._pooled["user"] = pool([self.user_layers[l] for l in self.slots], self.pooling)
        return self._pooled["user"]

    def pooled_items(self) -> np.ndarray:
        if "item" not in self._pooled:
            self._pooled["item"] = pool([self.item_layers[l] for l in self.slots], self.pooling)
        return self._pooled["item"]


def _check_graph(graph: BipartiteGraph, n_users: int, n_items: int):
    if (graph.num_users, graph.num_items) != (n_users, n_items):
        raise ConfigurationError(
            f"graph is {graph.num_users}x{graph.num_items} but tables are {n_users}x{n_items}")


def propagate(graph: BipartiteGraph, model: EmbeddingModel) -> LayerStack:
    _check_graph(graph, len(model.user_table), len(model.item_table))
    users = [model.user_table]
    items = [model.item_table]
    for _ in range(model.num_layers):
        eu, ei = users[-1], items[-1]
        users.append(np.asarray(graph.norm_adj @ ei))
        items.append(np.asarray(graph.norm_adj_t @ eu))
    return LayerStack(users, items, model.pooling, model.slots)


def propagate_adjoint(graph: BipartiteGraph, user_grads, item_grads):
    """Pull per-layer gradients back onto the base tables.

    Propagation is ``x_{l+1} = A x_l`` with the symmetric bipartite
    operator ``A``, so the adjoint is Horner accumulation from the top
    layer down with ``A^T = A``.
    """
    if len(user_grads) != len(item_grads):
        raise ConfigurationError("user and item gradient stacks differ in depth")
    for g in user_grads:
        if g.shape[0] != graph.num_users:
            raise ConfigurationError(f"user gradient has {g.shape[0]} rows, graph has {graph.num_users}")
    for g in item_grads:
        if g.shape[0] != graph.num_items:
            raise ConfigurationError(f"item gradient has {g.shape[0]} rows, graph has {graph.num_items}")
    hu = np.array(user_grads[-1], copy=True)
    hi = np.array(item_grads[-1], copy=True)
    for l in range(len(user_grads) - 2, -1, -1):
        hu, hi = user_grads[l] + graph.norm_adj @ hi, item_grads[l] + graph.norm_adj_t @ hu
    return hu, hi


def pool(layers, mode: str) -> np.ndarray:
    """Combine a list of equally shaped arrays along the last axis."""
    if mode == "mean":
        if len(layers) == 1:
            return layers[0]
        out = layers[0].copy()
        for x in layers[1:]:
            out += x
        return out / len(layers)
    if mode == "concat":
        return np.concatenate(layers, axis=-1)
    raise ConfigurationError(f"unknown pooling {mode!r}")


def pool_adjoint(grad: np.ndarray, mode: str, num_slots: int) -> list:
    if mode == "mean":
        return [grad / num_slots] * num_slots
    if mode == "concat":
        return np.split(grad, num_slots, axis=-1)
    raise ConfigurationError(f"unknown pooling {mode!r}")


def pool_layers(stack: LayerStack, pooling: str | None = None, slots=None):
    """Final ``(users, items)`` matrices for the stack."""
    pooling = pooling or stack.pooling
    slots = stack.slots if slots is None else slots
    if pooling == stack.pooling and tuple(slots) == tuple(stack.slots):
        return stack.pooled_users(), stack.pooled_items()
    return (pool([stack.user_layers[l] for l in slots], pooling),
            pool([stack.item_layers[l] for l in slots], pooling))


def score(u_vec, i_vec) -> float:
    u_vec, i_vec = np.asarray(u_vec), np.asarray(i_vec)
    if u_vec.shape != i_vec.shape:
        raise ConfigurationError(f"dimension mismatch: {u_vec.shape} vs {i_vec.shape}")
    return float(np.dot(u_vec, i_vec))


def export_embeddings(path, model: EmbeddingModel, seed=None, epoch=None, pooled: LayerStack | None = None):
    """CSV dump: ``kind,id,v0..`` with a ``#``-prefixed JSON header line.

    Base tables are written unless ``pooled`` is given, in which case the
    final pooled representations are written instead.
    """
    path = Path(path)
    header = {"D": model.dim, "L": model.num_layers, "pooling": model.pooling,
              "include_layer0": model.include_layer0, "seed": seed, "epoch": epoch,
              "representation": "pooled" if pooled is not None else "base"}
    if pooled is not None:
        users, items = pooled.pooled_users(), pooled.pooled_items()
    else:
        users, items = model.user_table, model.item_table
    width = users.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        fh.write(",".join(["kind", "id"] + [f"v{d}" for d in range(width)]) + "\n")
        for kind, table in (("u", users), ("i", items)):
            for row, vec in enumerate(table):
                fh.write(f"{kind},{row}," + ",".join(repr(float(x)) for x in vec) + "\n")
    return path


def read_embeddings_csv(path):
    """Inverse of :func:`export_embeddings`: ``(header, users, items)``."""
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline()[1:])
        fh.readline()
        users, items = [], []
        for line in fh:
            kind, _, *vals = line.rstrip("\n").split(",")
            (users if kind == "u" else items).append([float(v) for v in vals])
    return header, np.array(users), np.array(items)
