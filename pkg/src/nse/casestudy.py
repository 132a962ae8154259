"""Sampler geometry: how far negatives land from the positive, and whether
they sit on existing items (point), on the positive-boundary segment (line)
or inside the box the two span (area).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import InteractionDataset, PopularityTable
from .encoder import LayerStack
from .samplers import NegativeBatch, SamplerConfig, sample_negatives

OFF_LINE_THRESHOLD = 1e-6
AREA_SAMPLERS = ("mixgcf", "dins")


@dataclass(eq=False)
class SampleLog:
    sampler: str
    user: int
    pos: int
    epochs: np.ndarray          # (N,)
    positive: np.ndarray        # (N, D') pooled positive at draw time
    negative: np.ndarray        # (N, D') pooled negative
    boundary_ids: np.ndarray    # (N, S)
    alpha: np.ndarray           # (N, S, D)
    slot_positive: np.ndarray   # (N, S, D)
    slot_boundary: np.ndarray   # (N, S, D)
    slot_mixed: np.ndarray      # (N, S, D)
    item_table: np.ndarray | None = None   # pooled item vectors of the last snapshot

    def __len__(self):
        return len(self.epochs)

    @property
    def has_boundary(self) -> bool:
        return self.sampler in AREA_SAMPLERS

    @classmethod
    def concat(cls, logs: list) -> "SampleLog":
        first = logs[0]
        cat = lambda name: np.concatenate([getattr(l, name) for l in logs])  # noqa: E731
        return cls(first.sampler, first.user, first.pos, cat("epochs"), cat("positive"), cat("negative"),
                   cat("boundary_ids"), cat("alpha"), cat("slot_positive"), cat("slot_boundary"),
                   cat("slot_mixed"), logs[-1].item_table)


def _log_from_batch(neg: NegativeBatch, stack: LayerStack, epoch: int) -> SampleLog:
    n = len(neg)
    pos_slots = np.stack([stack.item_layers[l][neg.pos] for l in neg.source_layers], axis=1)
    bnd_slots = np.stack([stack.item_layers[l][neg.boundary[:, s]] for s, l in enumerate(neg.source_layers)],
                         axis=1)
    return SampleLog(neg.strategy, int(neg.users[0]), int(neg.pos[0]), np.full(n, epoch),
                     stack.pooled_items()[neg.pos], neg.pooled.copy(), neg.boundary.copy(), neg.alpha.copy(),
                     pos_slots, bnd_slots, np.stack(neg.mixed, axis=1), stack.pooled_items().copy())


def record_run(stack: LayerStack, config: SamplerConfig, user: int, pos: int, dataset: InteractionDataset,
               rng: np.random.Generator, draws: int = 10_000, popularity: PopularityTable | None = None,
               epoch: int = 0) -> SampleLog:
    """Draw ``draws`` negatives for the fixed pair against one model snapshot."""
    users = np.full(draws, user, dtype=np.int64)
    items = np.full(draws, pos, dtype=np.int64)
    neg = sample_negatives(users, items, stack, config, dataset, rng, popularity)
    return _log_from_batch(neg, stack, epoch)


def record_training_run(trainer, config: SamplerConfig, user: int, pos: int, epochs: int,
                        draws_per_epoch: int = 1, rng=None) -> SampleLog:
    """Train ``epochs`` more epochs, logging draws for the pair after each one."""
    rng = rng if rng is not None else np.random.default_rng(trainer.config.seed + 1)
    logs = []
    for _ in range(epochs):
        trainer.train_epoch()
        logs.append(record_run(trainer.snapshot(), config, user, pos, trainer.dataset, rng,
                               draws_per_epoch, trainer.popularity, trainer.epoch))
    return SampleLog.concat(logs)


def collinearity_residuals(pos, boundary, neg) -> np.ndarray:
    """Distance of ``neg`` to the line through ``pos`` and ``boundary``,
    divided by the segment length; rows with a zero-length segment report
    the raw distance to ``pos``. Operates on the last axis.
    """
    d = boundary - pos
    r = neg - pos
    dd = np.sum(d * d, axis=-1)
    safe = np.where(dd > 0, dd, 1.0)
    t = np.sum(r * d, axis=-1) / safe
    resid = np.linalg.norm(r - t[..., None] * d, axis=-1)
    return np.where(dd > 0, resid / np.sqrt(safe), np.linalg.norm(r, axis=-1))


def containment_mask(pos, boundary, neg) -> np.ndarray:
    return (neg >= np.minimum(pos, boundary)) & (neg <= np.maximum(pos, boundary))


def nearest_row_distance(vectors, table) -> np.ndarray:
    """Euclidean distance from each vector to its nearest table row."""
    out = np.empty(len(vectors))
    sq = np.sum(table * table, axis=1)
    for lo in range(0, len(vectors), 1024):
        v = vectors[lo:lo + 1024]
        d2 = sq[None, :] - 2.0 * v @ table.T + np.sum(v * v, axis=1)[:, None]
        idx = np.argmin(d2, axis=1)
        out[lo:lo + 1024] = np.linalg.norm(table[idx] - v, axis=1)
    return out


@dataclass
class GeometryReport:
    sampler: str
    samples: int
    radius_mean: float
    radius_max: float
    radius_mean_vs_avg_positive: float
    radius_max_vs_avg_positive: float
    collinearity_mean: float | None
    collinearity_max: float | None
    off_line_fraction: float | None
    containment_rate: float | None
    nearest_item_distance_max: float | None

    def as_record(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_record(), sort_keys=True)


def geometry_report(log: SampleLog) -> GeometryReport:
    """Summaries in native embedding space.

    Collinearity and containment are per pooling slot; a draw's residual is
    its largest slot residual. Both are ``None`` for point-wise samplers.
    """
    if not len(log):
        raise ValueError("empty sample log")
    radius = np.linalg.norm(log.negative - log.positive, axis=1)
    avg_pos = log.positive.mean(axis=0)
    radius_avg = np.linalg.norm(log.negative - avg_pos, axis=1)
    coll_mean = coll_max = off_line = contain = None
    if log.has_boundary:
        resid = collinearity_residuals(log.slot_positive, log.slot_boundary, log.slot_mixed).max(axis=1)
        coll_mean, coll_max = float(resid.mean()), float(resid.max())
        off_line = float(np.mean(resid > OFF_LINE_THRESHOLD))
        contain = float(containment_mask(log.slot_positive, log.slot_boundary, log.slot_mixed).mean())
    nearest = None
    if log.item_table is not None:
        nearest = float(nearest_row_distance(log.negative, log.item_table).max())
    return GeometryReport(log.sampler, len(log), float(radius.mean()), float(radius.max()),
                          float(radius_avg.mean()), float(radius_avg.max()),
                          coll_mean, coll_max, off_line, contain, nearest)


def export_log_csv(path, log: SampleLog):
    """One row per vector: ``role, epoch, draw, v0..``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["role", "epoch", "draw"] + [f"v{d}" for d in range(log.negative.shape[1])])
        for k in range(len(log)):
            w.writerow(["positive", int(log.epochs[k]), k] + [repr(float(x)) for x in log.positive[k]])
            w.writerow(["negative", int(log.epochs[k]), k] + [repr(float(x)) for x in log.negative[k]])


def export_log_jsonl(path, log: SampleLog):
    """Per-draw provenance records: boundary ids, alpha and pooled negative."""
    with open(path, "w") as fh:
        for k in range(len(log)):
            fh.write(json.dumps({
                "epoch": int(log.epochs[k]), "user": log.user, "pos_item": log.pos, "sampler": log.sampler,
                "boundary": log.boundary_ids[k].tolist(), "alpha": log.alpha[k].tolist(),
                "negative": log.negative[k].tolist(),
            }) + "\n")
