"""Negative samplers: point-wise (RNS, popularity, DNS), line-wise (MixGCF-style)
and area-wise (DINS, dimension independent mixup).

Every strategy produces the same record shape so that one adjoint serves
all of them. For each pooling slot ``s`` the negative's layer vector is::

    neg_s = alpha_s * item_layer[src_s][boundary_s] + (1 - alpha_s) * item_layer[src_s][pos]

Point-wise samplers use ``alpha = 1`` and ``boundary = sampled item``,
MixGCF uses a scalar ``alpha = 1 - lambda`` per slot, and DINS a per-dimension
``alpha``. The pooled negative is ``pool(neg_s for s in slots)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .dataset import InteractionDataset, PopularityTable
from .encoder import LayerStack, pool, pool_adjoint

STRATEGIES = ("rns", "popularity", "dns", "mixgcf", "dins")
BOUNDARY_MODES = ("dp", "random", "min_volume", "max_volume")
ABLATIONS = ("full", "A", "B", "C")

# rejection sampling gives way to explicit complement enumeration past this
DENSE_USER_FRACTION = 0.5
POPULARITY_RETRIES = 16


class SamplerError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "dins"
    M: int = 32
    beta: float = 1.0
    boundary_mode: str = "dp"
    disable_boundary: bool = False
    traditional_mixup: bool = False
    single_hop: bool = False
    grad_through_alpha: bool = False
    mix_a: float = 1.0
    mix_b: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown sampler {self.strategy!r}; choose from {STRATEGIES}")
        if self.boundary_mode not in BOUNDARY_MODES:
            raise ValueError(f"unknown boundary mode {self.boundary_mode!r}")
        if not self.M >= 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if not (np.isfinite(self.beta) and self.beta >= 0):
            raise ValueError(f"beta must be a finite value >= 0, got {self.beta}")
        if not (self.mix_a > 0 and self.mix_b > 0):
            raise ValueError("Beta(a, b) mixing parameters must be positive")

    def with_ablation(self, name: str) -> "SamplerConfig":
        """Variant A: random boundary. B: traditional mixup. C: single hop."""
        flags = {"full": {}, "A": {"disable_boundary": True},
                 "B": {"traditional_mixup": True}, "C": {"single_hop": True}}
        if name not in flags:
            raise ValueError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
        base = dict(asdict(self), disable_boundary=False, traditional_mixup=False, single_hop=False)
        base.update(flags[name])
        return SamplerConfig(**base)

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True, eq=False)
class CandidateSet:
    item_ids: np.ndarray
    M: int

    def __len__(self):
        return len(self.item_ids)


@dataclass(frozen=True, eq=False)
class LayerSample:
    layer: int
    boundary: int
    alpha: np.ndarray
    mixed: np.ndarray


@dataclass(frozen=True, eq=False)
class SyntheticNegative:
    user: int
    pos: int
    per_layer: tuple
    pooled: np.ndarray
    pooling: str
    provenance: dict = field(default_factory=dict)
    candidates: np.ndarray | None = None
    alpha_differentiable: bool = False

    @property
    def boundary_ids(self) -> list[int]:
        return [s.boundary for s in self.per_layer]


# ---------------------------------------------------------------- candidates

def _train_degrees(dataset: InteractionDataset) -> np.ndarray:
    deg = getattr(dataset, "_deg_cache", None)
    if deg is None:
        deg = dataset.train_degrees()
        object.__setattr__(dataset, "_deg_cache", deg)
    return deg


def _complement(dataset: InteractionDataset, user: int) -> np.ndarray:
    mask = np.ones(dataset.num_items, dtype=bool)
    mask[dataset.user_train_positives[user]] = False
    return np.flatnonzero(mask)


def _later_duplicates(cand: np.ndarray) -> np.ndarray:
    order = np.argsort(cand, axis=1, kind="stable")
    srt = np.take_along_axis(cand, order, axis=1)
    dup = np.zeros(cand.shape, dtype=bool)
    same = srt[:, 1:] == srt[:, :-1]
    rows, cols = np.nonzero(same)
    dup[rows, order[rows, cols + 1]] = True
    return dup


def sample_candidate_batch(users, M: int, dataset: InteractionDataset,
                           rng: np.random.Generator) -> np.ndarray:
    """``(B, M)`` distinct non-positive items per user, padded with -1.

    Padding only occurs for users with fewer than ``M`` eligible items.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    users = np.asarray(users, dtype=np.int64)
    n = dataset.num_items
    deg = _train_degrees(dataset)[users]
    eligible = n - deg
    if (eligible <= 0).any():
        u = int(users[np.argmax(eligible <= 0)])
        raise SamplerError(f"user {u} has interacted with every item; no negative exists")
    out = np.full((len(users), M), -1, dtype=np.int64)
    dense = (deg > DENSE_USER_FRACTION * n) | (eligible <= M)
    sparse_rows = np.flatnonzero(~dense)
    if len(sparse_rows):
        su = users[sparse_rows]
        cand = rng.integers(0, n, size=(len(sparse_rows), M))
        bad = dataset.is_train_positive(su[:, None], cand) | _later_duplicates(cand)
        while bad.any():
            r, c = np.nonzero(bad)
            cand[r, c] = rng.integers(0, n, size=len(r))
            rows = np.unique(r)
            bad = dataset.is_train_positive(su[rows, None], cand[rows]) | _later_duplicates(cand[rows])
            full = np.zeros((len(sparse_rows), M), dtype=bool)
            full[rows] = bad
            bad = full
        out[sparse_rows] = cand
    for row in np.flatnonzero(dense):
        comp = _complement(dataset, int(users[row]))
        k = min(M, len(comp))
        out[row, :k] = rng.choice(comp, size=k, replace=False)
    return out


def sample_candidates(user: int, M: int, dataset: InteractionDataset, rng) -> CandidateSet:
    row = sample_candidate_batch([user], M, dataset, rng)[0]
    return CandidateSet(row[row >= 0], M)


def rns_batch(users, dataset, rng) -> np.ndarray:
    return sample_candidate_batch(users, 1, dataset, rng)[:, 0]


def rns_sample(user: int, dataset: InteractionDataset, rng) -> int:
    return int(rns_batch([user], dataset, rng)[0])


def popularity_batch(users, table: PopularityTable, dataset: InteractionDataset, rng) -> np.ndarray:
    users = np.asarray(users, dtype=np.int64)
    cum = table.cumulative_weights
    total = table.total
    if total <= 0:
        raise SamplerError("popularity table has zero total weight")
    out = np.searchsorted(cum, rng.random(len(users)) * total, side="right")
    pending = np.flatnonzero(dataset.is_train_positive(users, out))
    for _ in range(POPULARITY_RETRIES):
        if not len(pending):
            break
        out[pending] = np.searchsorted(cum, rng.random(len(pending)) * total, side="right")
        pending = pending[dataset.is_train_positive(users[pending], out[pending])]
    for row in pending:
        w = table.item_weights.copy()
        w[dataset.user_train_positives[users[row]]] = 0.0
        s = w.sum()
        if s <= 0:
            raise SamplerError(f"user {users[row]}: no popular item outside the positives")
        out[row] = np.searchsorted(np.cumsum(w), rng.random() * s, side="right")
    return out


def popularity_sample(user, table, dataset, rng) -> int:
    return int(popularity_batch([user], table, dataset, rng)[0])


# ------------------------------------------------------------- selection

def _argbest(values: np.ndarray, cand: np.ndarray, largest=True) -> np.ndarray:
    """Per-row index of the best valid entry; ties go to the lowest item id."""
    valid = cand >= 0
    fill = -np.inf if largest else np.inf
    v = np.where(valid, values, fill)
    best = v.max(axis=1, keepdims=True) if largest else v.min(axis=1, keepdims=True)
    hit = (v == best) & valid
    # a row of all -inf (or all +inf) values still has valid entries as hits
    ids = np.where(hit, cand, np.iinfo(np.int64).max)
    return np.argmin(ids, axis=1)


def _gather_rows(items: np.ndarray, cand: np.ndarray) -> np.ndarray:
    return items[np.where(cand >= 0, cand, 0)]


def candidate_scores(user_vecs, cand, item_vecs) -> np.ndarray:
    """``(B, M)`` dot products of each user with its candidates."""
    return np.matmul(_gather_rows(item_vecs, cand), user_vecs[:, :, None])[:, :, 0]


def log_volumes(pos_vecs, cand, item_vecs) -> np.ndarray:
    """Log of the axis-aligned box volume spanned by positive and candidate."""
    gaps = np.abs(_gather_rows(item_vecs, cand) - pos_vecs[:, None, :])
    with np.errstate(divide="ignore"):
        return np.log(gaps).sum(axis=2)


def _random_valid(cand, rng) -> np.ndarray:
    counts = (cand >= 0).sum(axis=1)
    return rng.integers(0, counts)


def select_boundary_batch(user_vecs, cand, item_vecs, mode, pos_vecs=None, rng=None) -> np.ndarray:
    """Column index into ``cand`` of the boundary item for each row."""
    if mode == "dp":
        return _argbest(candidate_scores(user_vecs, cand, item_vecs), cand)
    if mode == "random":
        if rng is None:
            raise ValueError("random boundary selection needs an rng")
        return _random_valid(cand, rng)
    if mode in ("min_volume", "max_volume"):
        if pos_vecs is None:
            raise ValueError("volume boundary selection needs the positive item vectors")
        return _argbest(log_volumes(pos_vecs, cand, item_vecs), cand, largest=(mode == "max_volume"))
    raise ValueError(f"unknown boundary mode {mode!r}")


def _as_candidate_row(candidates) -> np.ndarray:
    ids = candidates.item_ids if isinstance(candidates, CandidateSet) else candidates
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise SamplerError("empty candidate set")
    return ids[None, :]


def dns_select(user_vec, candidates, item_vecs) -> int:
    cand = _as_candidate_row(candidates)
    col = select_boundary_batch(np.asarray(user_vec)[None, :], cand, item_vecs, "dp")[0]
    return int(cand[0, col])


def select_boundary(user_vec, candidates, item_vecs, mode="dp", pos_vec=None, rng=None) -> int:
    cand = _as_candidate_row(candidates)
    pv = None if pos_vec is None else np.asarray(pos_vec)[None, :]
    uv = None if user_vec is None else np.asarray(user_vec)[None, :]
    col = select_boundary_batch(uv, cand, item_vecs, mode, pv, rng)[0]
    return int(cand[0, col])


# ----------------------------------------------------------------- mixing

def dim_independent_weights(user_vec, boundary_vec, pos_vec, beta: float) -> np.ndarray:
    """Per-dimension mixing weight toward the boundary item.

    ``alpha_d = e^{u b} / (e^{u b} + beta e^{u p})`` evaluated as
    ``logistic(u_d b_d - u_d p_d - ln beta)``; ``beta == 0`` gives ones.
    Works row-wise on batches as well as on single vectors.
    """
    u = np.asarray(user_vec, dtype=np.float64)
    b = np.asarray(boundary_vec, dtype=np.float64)
    p = np.asarray(pos_vec, dtype=np.float64)
    if not (u.shape == b.shape == p.shape):
        raise ValueError(f"shape mismatch: {u.shape}, {b.shape}, {p.shape}")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if not (np.isfinite(u).all() and np.isfinite(b).all() and np.isfinite(p).all()):
        raise NumericError("non-finite embedding passed to mixing weights")
    if beta == 0:
        return np.ones_like(u)
    return expit(u * b - u * p - np.log(beta))


def mix(boundary_vec, pos_vec, alpha) -> np.ndarray:
    out = alpha * boundary_vec + (1.0 - alpha) * pos_vec
    # rounding can push the result one ulp outside the interval
    return np.clip(out, np.minimum(boundary_vec, pos_vec), np.maximum(boundary_vec, pos_vec))


def dim_independent_mixup(boundary_vec, pos_vec, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if (alpha < 0).any() or (alpha > 1).any() or not np.isfinite(alpha).all():
        raise ValueError("mixing weights must lie in [0, 1]")
    return mix(np.asarray(boundary_vec, dtype=np.float64), np.asarray(pos_vec, dtype=np.float64), alpha)


# ---------------------------------------------------------------- batches

@dataclass(eq=False)
class NegativeBatch:
    """One negative per (user, pos) pair in slot-record form (see module doc)."""

    users: np.ndarray
    pos: np.ndarray
    boundary: np.ndarray          # (B, S) item ids
    alpha: np.ndarray             # (B, S, D)
    source_layers: tuple          # len S, layer feeding each slot
    pooling: str
    strategy: str
    candidates: np.ndarray | None = None
    alpha_differentiable: bool = False
    provenance: dict = field(default_factory=dict)
    mixed: list = field(default_factory=list)   # S arrays of (B, D)
    pooled: np.ndarray | None = None

    def __len__(self):
        return len(self.users)

    def materialise(self, stack: LayerStack) -> "NegativeBatch":
        self.mixed = []
        for s, layer in enumerate(self.source_layers):
            items = stack.item_layers[layer]
            self.mixed.append(mix(items[self.boundary[:, s]], items[self.pos], self.alpha[:, s, :]))
        self.pooled = pool(self.mixed, self.pooling)
        return self

    def record(self, k: int) -> SyntheticNegative:
        per_layer = tuple(
            LayerSample(int(layer), int(self.boundary[k, s]), self.alpha[k, s].copy(), self.mixed[s][k].copy())
            for s, layer in enumerate(self.source_layers))
        cand = None if self.candidates is None else self.candidates[k][self.candidates[k] >= 0].copy()
        return SyntheticNegative(int(self.users[k]), int(self.pos[k]), per_layer, self.pooled[k].copy(),
                                 self.pooling, dict(self.provenance), cand, self.alpha_differentiable)

    def entity_ids(self) -> np.ndarray:
        """Distinct boundary items touched by this batch."""
        return np.unique(self.boundary)

    def adjoint(self, grad_pooled, stack: LayerStack, user_grads: list, item_grads: list):
        """Accumulate ``d loss / d layer`` contributions in place.

        ``user_grads`` / ``item_grads`` are per-layer arrays congruent to
        the stack; alpha is treated as a constant unless it is
        differentiable and flagged so at sampling time.
        """
        slot_grads = pool_adjoint(grad_pooled, self.pooling, len(self.source_layers))
        for s, layer in enumerate(self.source_layers):
            g = slot_grads[s]
            a = self.alpha[:, s, :]
            np.add.at(item_grads[layer], self.boundary[:, s], a * g)
            np.add.at(item_grads[layer], self.pos, (1.0 - a) * g)
            if self.alpha_differentiable:
                items = stack.item_layers[layer]
                b = items[self.boundary[:, s]]
                p = items[self.pos]
                u = stack.user_layers[layer][self.users]
                gz = g * (b - p) * a * (1.0 - a)
                np.add.at(user_grads[layer], self.users, gz * (b - p))
                np.add.at(item_grads[layer], self.boundary[:, s], gz * u)
                np.add.at(item_grads[layer], self.pos, -gz * u)


def _point_batch(users, pos, items, stack, strategy, candidates=None) -> NegativeBatch:
    slots = stack.slots
    B = len(users)
    boundary = np.repeat(np.asarray(items, dtype=np.int64)[:, None], len(slots), axis=1)
    alpha = np.ones((B, len(slots), stack.dim))
    return NegativeBatch(users, pos, boundary, alpha, tuple(slots), stack.pooling, strategy, candidates)


def _source_layers(stack: LayerStack, single_hop: bool) -> tuple:
    if single_hop:
        h = min(1, stack.num_layers)
        return (h,) * len(stack.slots)
    return tuple(stack.slots)


def _dins_batch(users, pos, stack, config, dataset, rng) -> NegativeBatch:
    cand = sample_candidate_batch(users, config.M, dataset, rng)
    src = _source_layers(stack, config.single_hop)
    B, D = len(users), stack.dim
    mode = "random" if config.disable_boundary else config.boundary_mode
    trad = rng.random(B) if config.traditional_mixup else None
    boundary = np.empty((B, len(src)), dtype=np.int64)
    alpha = np.empty((B, len(src), D))
    rows = np.arange(B)
    done = {}
    for s, layer in enumerate(src):
        if layer not in done:
            u = stack.user_layers[layer][users]
            items = stack.item_layers[layer]
            p = items[pos]
            col = select_boundary_batch(u, cand, items, mode, p, rng)
            b_ids = cand[rows, col]
            if trad is not None:
                a = np.repeat(trad[:, None], D, axis=1)
            else:
                a = dim_independent_weights(u, items[b_ids], p, config.beta)
            done[layer] = (b_ids, a)
        boundary[:, s], alpha[:, s, :] = done[layer]
    differentiable = (config.grad_through_alpha and not config.traditional_mixup and config.beta > 0)
    return NegativeBatch(users, pos, boundary, alpha, src, stack.pooling, "dins", cand, differentiable)


def _mixgcf_batch(users, pos, stack, config, dataset, rng) -> NegativeBatch:
    cand = sample_candidate_batch(users, config.M, dataset, rng)
    src = tuple(stack.slots)
    B, D = len(users), stack.dim
    boundary = np.empty((B, len(src)), dtype=np.int64)
    alpha = np.empty((B, len(src), D))
    rows = np.arange(B)
    for s, layer in enumerate(src):
        if config.mix_a == 1.0 and config.mix_b == 1.0:
            lam = rng.random(cand.shape)
        else:
            lam = rng.beta(config.mix_a, config.mix_b, size=cand.shape)
        a = 1.0 - lam
        items = stack.item_layers[layer]
        u = stack.user_layers[layer][users]
        pos_score = np.sum(u * items[pos], axis=1)
        # <u, a m + (1 - a) p> without materialising the mixed candidates
        scores = a * candidate_scores(u, cand, items) + (1.0 - a) * pos_score[:, None]
        col = _argbest(scores, cand)
        boundary[:, s] = cand[rows, col]
        alpha[:, s, :] = a[rows, col][:, None]
    return NegativeBatch(users, pos, boundary, alpha, src, stack.pooling, "mixgcf", cand)


def sample_negatives(users, pos, stack: LayerStack, config: SamplerConfig, dataset: InteractionDataset,
                     rng: np.random.Generator, popularity: PopularityTable | None = None) -> NegativeBatch:
    """Draw one negative per pair and materialise its vectors."""
    users = np.asarray(users, dtype=np.int64)
    pos = np.asarray(pos, dtype=np.int64)
    strategy = config.strategy
    if strategy == "rns":
        batch = _point_batch(users, pos, rns_batch(users, dataset, rng), stack, strategy)
    elif strategy == "popularity":
        if popularity is None:
            raise ValueError("popularity sampling needs a PopularityTable")
        batch = _point_batch(users, pos, popularity_batch(users, popularity, dataset, rng), stack, strategy)
    elif strategy == "dns":
        cand = sample_candidate_batch(users, config.M, dataset, rng)
        col = _argbest(candidate_scores(stack.pooled_users()[users], cand, stack.pooled_items()), cand)
        batch = _point_batch(users, pos, cand[np.arange(len(users)), col], stack, strategy, cand)
    elif strategy == "mixgcf":
        batch = _mixgcf_batch(users, pos, stack, config, dataset, rng)
    else:
        batch = _dins_batch(users, pos, stack, config, dataset, rng)
    batch.provenance = {"sampler": strategy, "config_hash": config.fingerprint()}
    return batch.materialise(stack)


def _single(user, pos, stack, config, dataset, rng, strategy) -> SyntheticNegative:
    if config.strategy != strategy:
        raise ValueError(f"config is for {config.strategy!r}, not {strategy!r}")
    return sample_negatives([user], [pos], stack, config, dataset, rng).record(0)


def dins_sample(user, pos, stack, config, dataset, rng) -> SyntheticNegative:
    return _single(user, pos, stack, config, dataset, rng, "dins")


def mixgcf_sample(user, pos, stack, config, dataset, rng) -> SyntheticNegative:
    return _single(user, pos, stack, config, dataset, rng, "mixgcf")


def synthetic_negative_adjoint(neg: SyntheticNegative, grad_out, stack: LayerStack | None = None) -> dict:
    """Gradients keyed by ``(kind, id, layer)`` for a pooled-vector gradient.

    ``stack`` is only needed when alpha is differentiable.
    """
    if not neg.per_layer:
        raise ValueError("negative carries no per-layer provenance")
    if neg.alpha_differentiable and stack is None:
        raise ValueError("differentiable alpha needs the layer stack")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    out: dict = {}

    def add(key, g):
        out[key] = out[key] + g if key in out else g

    for rec, g in zip(neg.per_layer, pool_adjoint(grad_out, neg.pooling, len(neg.per_layer))):
        a = rec.alpha
        add(("item", rec.boundary, rec.layer), a * g)
        add(("item", neg.pos, rec.layer), (1.0 - a) * g)
        if neg.alpha_differentiable:
            b = stack.item_layers[rec.layer][rec.boundary]
            p = stack.item_layers[rec.layer][neg.pos]
            u = stack.user_layers[rec.layer][neg.user]
            gz = g * (b - p) * a * (1.0 - a)
            add(("user", neg.user, rec.layer), gz * (b - p))
            add(("item", rec.boundary, rec.layer), gz * u)
            add(("item", neg.pos, rec.layer), -gz * u)
    return out
