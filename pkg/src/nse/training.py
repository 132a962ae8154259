"""Mini-batch BPR training with hand-derived gradients and row-sparse Adam."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

from .dataset import BipartiteGraph, InteractionDataset, PopularityTable, build_graph, popularity_distribution
from .encoder import EmbeddingModel, LayerStack, pool_adjoint, propagate, propagate_adjoint
from .samplers import NegativeBatch, SamplerConfig, dim_independent_weights, sample_negatives

log = logging.getLogger(__name__)

ENCODERS = ("mf", "lightgcn")
LOSS_WARN = 10 * math.log(2)
CHECKPOINT_MAGIC = "NSECKPT"
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 2048
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    encoder: str = "mf"
    num_layers: int = 0
    dim: int = 64
    pooling: str = "mean"
    include_layer0: bool = True
    eval_every: int = 0
    K: int = 20
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 0 or self.dim < 1 or self.num_layers < 0 or self.K < 1:
            raise ValueError("epochs, dim, num_layers and K must be non-negative (dim, K positive)")

    @property
    def layers(self) -> int:
        return 0 if self.encoder == "mf" else self.num_layers

    def as_dict(self) -> dict:
        d = asdict(self)
        d["sampler"] = asdict(self.sampler)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sampler = d.pop("sampler", {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(sampler=SamplerConfig(**sampler), **d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# ------------------------------------------------------------------ loss

def bpr_loss(pos_score, neg_score):
    """``-log(sigmoid(pos - neg))`` as ``softplus(neg - pos)``."""
    pos_score = np.asarray(pos_score, dtype=np.float64)
    neg_score = np.asarray(neg_score, dtype=np.float64)
    if not (np.isfinite(pos_score).all() and np.isfinite(neg_score).all()):
        raise FloatingPointError("non-finite score in BPR loss")
    out = np.logaddexp(0.0, neg_score - pos_score)
    return float(out) if out.ndim == 0 else out


def bpr_gradients(user_vec, pos_vec, neg_vec):
    """Gradients of the BPR loss w.r.t. the pooled user, positive and negative vectors."""
    u = np.asarray(user_vec, dtype=np.float64)
    p = np.asarray(pos_vec, dtype=np.float64)
    n = np.asarray(neg_vec, dtype=np.float64)
    diff = np.sum(u * (p - n), axis=-1, keepdims=True)
    c = expit(diff) - 1.0
    return c * (p - n), c * u, -c * u


def l2_regularization(tables: dict, ids: dict, weight_decay: float, batch_size: int):
    """``(wd / 2) * sum ||e||^2 / batch_size`` over distinct base rows.

    ``ids`` maps a table name to the row ids participating in the batch.
    Returns the loss term and per-table ``(rows, grad_rows)``.
    """
    term = 0.0
    grads = {}
    for name, rows in ids.items():
        rows = np.unique(np.asarray(rows, dtype=np.int64))
        vecs = tables[name][rows]
        if weight_decay == 0:
            grads[name] = (rows, np.zeros_like(vecs))
            continue
        term += 0.5 * weight_decay * float(np.sum(vecs * vecs)) / batch_size
        grads[name] = (rows, weight_decay * vecs / batch_size)
    return term, grads


# ------------------------------------------------------------------ adam

@dataclass(eq=False)
class AdamState:
    first_moment: dict
    second_moment: dict
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_tables(cls, tables: dict, **kw) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in tables.items()},
                   {k: np.zeros_like(v) for k, v in tables.items()}, **kw)


def adam_step(state: AdamState, tables: dict, grads: dict, lr: float) -> dict:
    """Bias-corrected Adam, in place. Rows with an all-zero gradient are left alone."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        rows = np.flatnonzero(np.any(g != 0, axis=1))
        if not len(rows):
            continue
        gr = g[rows]
        m = state.first_moment[name]
        v = state.second_moment[name]
        m[rows] = state.beta1 * m[rows] + (1.0 - state.beta1) * gr
        v[rows] = state.beta2 * v[rows] + (1.0 - state.beta2) * gr * gr
        mhat = m[rows] / c1
        vhat = v[rows] / c2
        tables[name][rows] -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return tables


# ---------------------------------------------------------- batch forward

def _slot_adjoint(grad, stack: LayerStack, ids, layer_grads):
    for layer, g in zip(stack.slots, pool_adjoint(grad, stack.pooling, len(stack.slots))):
        np.add.at(layer_grads[layer], ids, g)


def refresh_alpha(neg: NegativeBatch, stack: LayerStack, beta: float):
    """Recompute differentiable DINS weights from the current layer vectors."""
    for s, layer in enumerate(neg.source_layers):
        items = stack.item_layers[layer]
        neg.alpha[:, s, :] = dim_independent_weights(
            stack.user_layers[layer][neg.users], items[neg.boundary[:, s]], items[neg.pos], beta)


@dataclass
class BatchResult:
    bpr: np.ndarray
    reg: float
    user_grad: np.ndarray
    item_grad: np.ndarray

    @property
    def loss(self) -> float:
        return float(self.bpr.mean()) + self.reg


def batch_gradients(model: EmbeddingModel, graph: BipartiteGraph, stack: LayerStack,
                    neg: NegativeBatch, weight_decay: float) -> BatchResult:
    """Loss and base-table gradients for a batch with fixed negative draws."""
    users, pos = neg.users, neg.pos
    B = len(users)
    pu_all, pi_all = stack.pooled_users(), stack.pooled_items()
    u, p, n = pu_all[users], pi_all[pos], neg.pooled
    bpr = bpr_loss(np.sum(u * p, axis=1), np.sum(u * n, axis=1))
    gu, gp, gn = bpr_gradients(u, p, n)
    gu, gp, gn = gu / B, gp / B, gn / B

    user_grads = [np.zeros_like(x) for x in stack.user_layers]
    item_grads = [np.zeros_like(x) for x in stack.item_layers]
    _slot_adjoint(gu, stack, users, user_grads)
    _slot_adjoint(gp, stack, pos, item_grads)
    neg.adjoint(gn, stack, user_grads, item_grads)
    if model.num_layers:
        gU, gI = propagate_adjoint(graph, user_grads, item_grads)
    else:
        gU, gI = user_grads[0], item_grads[0]

    tables = model.tables()
    reg, reg_grads = l2_regularization(
        tables, {"user": users, "item": np.concatenate([pos, neg.boundary.ravel()])}, weight_decay, B)
    for name, target in (("user", gU), ("item", gI)):
        rows, g = reg_grads[name]
        target[rows] += g
    return BatchResult(bpr, reg, gU, gI)


def batch_loss(model, graph, neg: NegativeBatch, weight_decay: float, beta: float | None = None) -> float:
    """Scalar batch loss with the sampler draws frozen (gradient-check probe)."""
    stack = propagate(graph, model)
    if neg.alpha_differentiable:
        refresh_alpha(neg, stack, beta)
    neg.materialise(stack)
    u = stack.pooled_users()[neg.users]
    p = stack.pooled_items()[neg.pos]
    bpr = bpr_loss(np.sum(u * p, axis=1), np.sum(u * neg.pooled, axis=1))
    reg, _ = l2_regularization(model.tables(), {"user": neg.users,
                                                "item": np.concatenate([neg.pos, neg.boundary.ravel()])},
                               weight_decay, len(neg.users))
    return float(bpr.mean()) + reg


# ------------------------------------------------------------------ loop

@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    mean_reg: float
    wall_ms: float
    batches: int
    metrics: dict | None = None

    def as_record(self) -> dict:
        rec = {"epoch": self.epoch, "mean_loss": self.mean_loss, "mean_reg": self.mean_reg,
               "wall_ms": round(self.wall_ms, 3), "batches": self.batches}
        if self.metrics:
            rec.update(self.metrics)
        return rec


@dataclass(eq=False)
class Trainer:
    """Holds everything one run mutates: tables, optimiser state and rng streams."""

    dataset: InteractionDataset
    config: TrainConfig
    graph: BipartiteGraph | None = None
    model: EmbeddingModel | None = None
    adam: AdamState | None = None
    popularity: PopularityTable | None = None
    epoch: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        cfg = self.config
        init_ss, shuffle_ss, sample_ss = np.random.SeedSequence(cfg.seed).spawn(3)
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.sample_rng = np.random.default_rng(sample_ss)
        if self.graph is None:
            self.graph = build_graph(self.dataset)
        if self.model is None:
            self.model = EmbeddingModel.create(
                self.dataset.num_users, self.dataset.num_items, cfg.dim, np.random.default_rng(init_ss),
                num_layers=cfg.layers, pooling=cfg.pooling, include_layer0=cfg.include_layer0)
        if self.adam is None:
            self.adam = AdamState.for_tables(self.model.tables())
        if cfg.sampler.strategy == "popularity" and self.popularity is None:
            self.popularity = popularity_distribution(self.dataset)

    def snapshot(self) -> LayerStack:
        return propagate(self.graph, self.model)

    def train_batch(self, users, pos) -> BatchResult:
        cfg = self.config
        stack = propagate(self.graph, self.model)
        neg = sample_negatives(users, pos, stack, cfg.sampler, self.dataset, self.sample_rng, self.popularity)
        res = batch_gradients(self.model, self.graph, stack, neg, cfg.weight_decay)
        adam_step(self.adam, self.model.tables(), {"user": res.user_grad, "item": res.item_grad},
                  cfg.learning_rate)
        return res

    def train_epoch(self) -> EpochReport:
        cfg = self.config
        start = time.perf_counter()
        edges = self.dataset.train_edges[self.shuffle_rng.permutation(self.dataset.num_train)]
        total_bpr = 0.0
        total_reg = 0.0
        batches = 0
        for lo in range(0, len(edges), cfg.batch_size):
            chunk = edges[lo:lo + cfg.batch_size]
            res = self.train_batch(chunk[:, 0], chunk[:, 1])
            total_bpr += float(res.bpr.sum())
            total_reg += res.reg
            batches += 1
        mean_loss = total_bpr / len(edges)
        self.epoch += 1
        if not math.isfinite(mean_loss) or not math.isfinite(total_reg):
            raise TrainingDiverged(
                f"epoch {self.epoch}: non-finite loss (bpr={mean_loss}, reg={total_reg}); "
                f"lr={cfg.learning_rate} sampler={cfg.sampler.strategy}")
        if mean_loss > LOSS_WARN:
            log.warning("epoch %d: mean loss %.3f exceeds %.3f", self.epoch, mean_loss, LOSS_WARN)
        report = EpochReport(self.epoch, mean_loss, total_reg / max(batches, 1),
                             (time.perf_counter() - start) * 1e3, batches)
        self.history.append(report)
        return report

    def fit(self, on_epoch=None, evaluate=None):
        """Run the configured epoch budget.

        ``evaluate(trainer)`` is called every ``eval_every`` epochs and its
        dict result attached to the epoch report; ``on_epoch(report)`` is
        called after each epoch.
        """
        cfg = self.config
        while self.epoch < cfg.epochs:
            report = self.train_epoch()
            if evaluate is not None and cfg.eval_every and self.epoch % cfg.eval_every == 0:
                report.metrics = evaluate(self)
            if on_epoch is not None:
                on_epoch(report)
        return self


def train(dataset: InteractionDataset, config: TrainConfig, **kw) -> Trainer:
    return Trainer(dataset, config, **kw).fit()


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, trainer: Trainer, extra: dict | None = None) -> Path:
    """Header line (JSON) followed by raw little-endian float64 arrays."""
    m = trainer.model
    arrays = [("user", m.user_table), ("item", m.item_table),
              ("m.user", trainer.adam.first_moment["user"]), ("m.item", trainer.adam.first_moment["item"]),
              ("v.user", trainer.adam.second_moment["user"]), ("v.item", trainer.adam.second_moment["item"])]
    header = {
        "magic": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION,
        "num_users": int(m.user_table.shape[0]), "num_items": int(m.item_table.shape[0]),
        "D": m.dim, "L": m.num_layers, "pooling": m.pooling, "include_layer0": m.include_layer0,
        "epoch": trainer.epoch, "seed": trainer.config.seed, "adam_step": trainer.adam.step_count,
        "config": trainer.config.as_dict(), "arrays": [name for name, _ in arrays],
    }
    if extra:
        header.update(extra)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Returns ``(header, model, adam_state)``."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
        nu, ni, D = header["num_users"], header["num_items"], header["D"]
        shapes = {"user": (nu, D), "item": (ni, D)}
        arrs = {}
        for name in header["arrays"]:
            shape = shapes[name.split(".")[-1]]
            buf = fh.read(8 * shape[0] * shape[1])
            arrs[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    model = EmbeddingModel(arrs["user"], arrs["item"], header["L"], header["pooling"], header["include_layer0"])
    adam = AdamState({"user": arrs["m.user"], "item": arrs["m.item"]},
                     {"user": arrs["v.user"], "item": arrs["v.item"]}, header["adam_step"])
    return header, model, adam
