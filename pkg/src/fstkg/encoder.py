"""Time-aware entity encoder and translation score.

An entity at time t is represented by attending over its sampled temporal
neighbors: each neighbor event gets a logit from the concatenation
[target repr | neighbor repr | relation emb | time code of (t - t_i)] dotted with
a shared vector, logits are softmax-normalised, and the weighted sum of
neighbor representations is pushed through W and a ReLU. Entities with no
sampled neighbors keep their base embedding row.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .kgstore import TemporalKG
from .numkernel import Tensor
from .sampler import NeighborSet, sample_temporal_neighbors

TRAINABLE = ("entity", "relation", "W", "attn")
CHECKPOINT_FORMAT = "fstkg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    entity: np.ndarray  # (|E|, d)
    relation: np.ndarray  # (|R|, d)
    W: np.ndarray  # (d, d)
    attn: np.ndarray  # (4d,)
    time_freq: np.ndarray  # (d,), fixed
    time_phase: np.ndarray  # (d,), fixed
    seed: int = 0

    def __post_init__(self):
        d = self.entity.shape[1]
        if self.relation.shape[1] != d or self.W.shape != (d, d) or self.attn.shape != (4 * d,):
            raise ValueError("inconsistent parameter shapes")
        if self.time_freq.shape != (d,) or self.time_phase.shape != (d,):
            raise ValueError("time encoding must have d frequencies and d phases")

    @property
    def dim(self) -> int:
        return self.entity.shape[1]

    def trainable(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in TRAINABLE}

    def replace(self, **arrays) -> "ModelParams":
        kw = {k: getattr(self, k) for k in TRAINABLE + ("time_freq", "time_phase")}
        kw.update(arrays)
        return ModelParams(**kw, seed=self.seed)

    def copy(self) -> "ModelParams":
        return self.replace(**{k: v.copy() for k, v in self.trainable().items()})

    def step(self, grads: dict[str, np.ndarray], lr: float) -> "ModelParams":
        return self.replace(**{k: getattr(self, k) - lr * grads[k] for k in TRAINABLE})

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, k).ravel() for k in TRAINABLE])

    def equals(self, other: "ModelParams") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in TRAINABLE + ("time_freq", "time_phase"))


def init_params(num_entities: int, num_relations: int, dim: int, seed: int = 0,
                freq_decay: float | None = None) -> ModelParams:
    """Seeded initialisation. Time frequencies are log-spaced with a small jitter."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(dim)
    entity = rng.normal(0.0, scale, (num_entities, dim))
    relation = rng.normal(0.0, scale, (num_relations, dim))
    W = np.eye(dim) + rng.normal(0.0, 0.1 * scale, (dim, dim))
    attn = rng.normal(0.0, 0.1, 4 * dim)
    if freq_decay is None:
        freq_decay = 4.0 / max(dim - 1, 1)
    freq = 10.0 ** (-freq_decay * np.arange(dim)) * (1.0 + 0.05 * rng.uniform(-1, 1, dim))
    phase = rng.uniform(0.0, 2 * math.pi, dim)
    return ModelParams(entity, relation, W, attn, freq, phase, seed=seed)


def time_encode(dt, params: ModelParams) -> np.ndarray:
    """sqrt(1/d) * cos(freq * dt + phase); ``dt`` scalar or array of shape (n,)."""
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(dt < 0):
        raise ValueError("negative time delta (would read the future)")
    d = params.dim
    return math.sqrt(1.0 / d) * np.cos(np.multiply.outer(dt, params.time_freq) + params.time_phase)


# -- sampling context ------------------------------------------------------

class EncoderContext:
    """Graph visible to the encoder plus sampler settings and a neighbor cache.

    Sampling is deterministic, so results are memoised per (entity, time).
    """

    def __init__(self, kg: TemporalKG, budget: int = 16, time_bound: float = math.inf, layers: int = 1):
        if layers < 1:
            raise ValueError("need at least one aggregation layer")
        self.kg = kg
        self.budget = budget
        self.time_bound = time_bound
        self.layers = layers
        self._cache: dict[tuple[int, float], NeighborSet] = {}

    def neighbors(self, entity: int, t: float) -> NeighborSet:
        key = (entity, t)
        ns = self._cache.get(key)
        if ns is None:
            ns = sample_temporal_neighbors(self.kg, entity, t, self.budget, self.time_bound)
            self._cache[key] = ns
        return ns


def param_tensors(params: ModelParams, tape: nk.Tape | None = None) -> dict[str, Tensor]:
    if tape is None:
        return {k: Tensor(v, check=False) for k, v in params.trainable().items()}
    return {k: tape.watch(v, name=k) for k, v in params.trainable().items()}


# -- attention -------------------------------------------------------------

def _segment_softmax(q: Tensor, seg: np.ndarray, n: int) -> Tensor:
    shift = np.full(n, -np.inf)
    np.maximum.at(shift, seg, q.value)
    shift[~np.isfinite(shift)] = 0.0
    e = nk.exp(nk.sub(q, shift[seg]))  # shift is a constant: softmax is shift invariant
    den = nk.segment_sum(e, seg, n)
    den = nk.add(den, (np.bincount(seg, minlength=n) == 0).astype(float))  # empty rows
    return nk.div(e, nk.take(den, seg))


def attention_weights(target_repr, neighbors: NeighborSet, layer_reprs, params: ModelParams | dict,
                      t: float | None = None, time_params: ModelParams | None = None):
    """Softmax attention weights of one target over its neighbor events.

    ``params`` may be a :class:`ModelParams` or a dict of tensors (``relation``,
    ``attn``); ``time_params`` then supplies the fixed time encoding.
    """
    if len(neighbors) == 0:
        raise ValueError("attention over an empty neighbor set")
    t = neighbors.query_time if t is None else t
    P = param_tensors(params) if isinstance(params, ModelParams) else params
    tp = params if isinstance(params, ModelParams) else time_params
    n = len(neighbors)
    rels = np.array([ev.relation for ev in neighbors.events])
    dts = t - np.array([ev.time for ev in neighbors.events], dtype=np.float64)
    tgt = nk.as_tensor(target_repr)
    nbr = nk.as_tensor(layer_reprs)
    X = nk.concat([nk.take(nk.reshape(tgt, (1, -1)), np.zeros(n, dtype=int)), nbr,
                   nk.take(P["relation"], rels), time_encode(dts, tp)], axis=1)
    q = nk.matmul(X, P["attn"])
    return _segment_softmax(q, np.zeros(n, dtype=np.int64), 1)


# -- aggregation -----------------------------------------------------------

def encode_batch(ctx: EncoderContext, P: dict[str, Tensor], time_params: ModelParams,
                 entities, times, layer: int | None = None) -> Tensor:
    """Representations of many (entity, time) pairs at once, shape (n, d)."""
    entities = np.asarray(entities, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    layer = ctx.layers if layer is None else layer
    base = nk.take(P["entity"], entities)
    if layer == 0:
        return base
    n = len(entities)
    sets = [ctx.neighbors(int(e), float(t)) for e, t in zip(entities, times)]
    counts = np.array([len(s) for s in sets], dtype=np.int64)
    N = int(counts.sum())
    if N == 0:
        return base
    seg = np.repeat(np.arange(n), counts)
    flat = np.array([ev[:3] for s in sets for ev in s.events], dtype=np.int64)
    nb_ent, nb_rel, nb_time = flat[:, 0], flat[:, 1], flat[:, 2].astype(np.float64)

    target_prev = base if layer == 1 else encode_batch(ctx, P, time_params, entities, times, layer - 1)
    nb_prev = encode_batch(ctx, P, time_params, nb_ent, nb_time, layer - 1)
    X = nk.concat([nk.take(target_prev, seg), nb_prev, nk.take(P["relation"], nb_rel),
                   time_encode(times[seg] - nb_time, time_params)], axis=1)
    alpha = _segment_softmax(nk.matmul(X, P["attn"]), seg, n)
    agg = nk.segment_sum(nk.mul(nk.reshape(alpha, (N, 1)), nb_prev), seg, n)
    h = nk.relu(nk.matmul(agg, P["W"]))
    empty = (counts == 0).astype(np.float64)[:, None]
    if not empty.any():
        return h
    return nk.add(h, nk.mul(base, empty))


def encode_entity(kg_or_ctx, params: ModelParams, entity: int, t: float, layers: int = 1,
                  budget: int = 16, time_bound: float = math.inf) -> np.ndarray:
    ctx = kg_or_ctx if isinstance(kg_or_ctx, EncoderContext) else EncoderContext(kg_or_ctx, budget, time_bound, layers)
    if not (0 <= entity < params.entity.shape[0]):
        raise KeyError(f"unknown entity id {entity}")
    out = encode_batch(ctx, param_tensors(params), params, [entity], [t], layers)
    return out.value[0]


# -- scoring ---------------------------------------------------------------

def score_rows(hs: Tensor, hr: Tensor, ho: Tensor) -> Tensor:
    """Row-wise -||h_s + h_r - h_o||^2."""
    diff = nk.sub(nk.add(hs, hr), ho)
    return nk.mul(nk.sum(nk.mul(diff, diff), axis=-1), -1.0)


def score(params: ModelParams, h_s, r: int, h_o) -> float:
    h_s, h_o = np.asarray(h_s, float), np.asarray(h_o, float)
    if h_s.shape != (params.dim,) or h_o.shape != (params.dim,):
        raise nk.ShapeError(f"score: expected vectors of dimension {params.dim}")
    return float(score_rows(Tensor(h_s), Tensor(params.relation[r]), Tensor(h_o)).value)


# -- new-entity rows -------------------------------------------------------

def warm_start_row(params: ModelParams, entity: int, counterparts) -> ModelParams:
    """Copy of ``params`` whose row for ``entity`` is the mean of the counterparts' rows.

    The table grows if ``entity`` is beyond it; no counterparts gives a zero row.
    """
    table = params.entity
    if entity >= table.shape[0]:
        grow = np.zeros((entity + 1 - table.shape[0], table.shape[1]))
        table = np.vstack([table, grow])
    else:
        table = table.copy()
    cps = [c for c in counterparts if c != entity and c < params.entity.shape[0]]
    table[entity] = params.entity[cps].mean(axis=0) if cps else 0.0
    return params.replace(entity=table)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": params.seed,
        "dim": params.dim,
        "arrays": {k: {"shape": list(getattr(params, k).shape), "data": getattr(params, k).ravel().tolist()}
                   for k in TRAINABLE + ("time_freq", "time_phase")},
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    arrays = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["arrays"].items()}
    return ModelParams(**arrays, seed=doc["seed"])
