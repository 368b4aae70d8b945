"""Negative sampling, margin ranking loss and filtered ranking metrics."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numkernel as nk
from .encoder import EncoderContext, ModelParams, encode_batch, param_tensors, score_rows
from .kgstore import TemporalKG
from .numkernel import Tensor

OBJECT, SUBJECT = "object", "subject"
HITS_AT = (1, 3, 10)


# -- negatives -------------------------------------------------------------

def corrupt_ids(num_entities: int, true_ids, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws over all entities except the true one, shape (len(true_ids), n)."""
    if n < 1:
        raise ValueError("need at least one negative per positive")
    if num_entities < 2:
        raise ValueError("negative sampling needs at least two entities")
    true_ids = np.asarray(true_ids, dtype=np.int64).reshape(-1, 1)
    x = rng.integers(0, num_entities - 1, size=(len(true_ids), n))
    return x + (x >= true_ids)


def sample_negatives(kg: TemporalKG, positive, n: int, rng: np.random.Generator,
                     corrupt: str = OBJECT) -> list[tuple[int, int, int, int]]:
    """``n`` corrupted copies of ``positive`` with the ``corrupt`` slot redrawn (with replacement)."""
    s, r, o, t = (int(x) for x in positive)
    slot_true = o if corrupt == OBJECT else s
    ids = corrupt_ids(kg.num_entities, [slot_true], n, rng)[0]
    if corrupt == OBJECT:
        return [(s, r, int(x), t) for x in ids]
    return [(int(x), r, o, t) for x in ids]


# -- loss ------------------------------------------------------------------

def hinge_loss(pos_scores, neg_scores, gamma: float) -> Tensor:
    """sum_i sum_j max(gamma - pos_i + neg_ij, 0); ``neg_scores`` has shape (P, n)."""
    if gamma <= 0:
        raise ValueError("margin must be positive")
    pos, neg = nk.as_tensor(pos_scores), nk.as_tensor(neg_scores)
    if neg.ndim != 2 or neg.shape[0] != pos.shape[0] or neg.shape[1] < 1:
        raise nk.ShapeError(f"hinge_loss: scores {pos.shape} vs negatives {neg.shape}")
    viol = nk.add(nk.sub(neg, nk.reshape(pos, (-1, 1))), gamma)
    return nk.sum(nk.relu(viol))


@dataclass
class LossBatch:
    """Positive facts with pre-drawn corruptions; fixed so the loss is deterministic."""
    facts: np.ndarray  # (P, 4)
    sides: np.ndarray  # (P,) 0 = corrupt object, 1 = corrupt subject
    negatives: np.ndarray  # (P, n) replacement entity ids

    def __len__(self):
        return len(self.facts)


def make_loss_batch(kg: TemporalKG, fact_ids: Sequence[int], n_neg: int, rng: np.random.Generator,
                    focus: int | None = None, num_entities: int | None = None) -> LossBatch:
    """Draw negatives for ``fact_ids``.

    With ``focus`` (the new entity) the endpoint opposite it is corrupted;
    otherwise the side is chosen uniformly per fact.
    """
    facts = kg.quads[np.asarray(fact_ids, dtype=np.int64)].reshape(-1, 4)
    if focus is None:
        sides = rng.integers(0, 2, len(facts))
    else:
        sides = (facts[:, 0] != focus).astype(np.int64)  # focus is object -> corrupt subject
    true = np.where(sides == 0, facts[:, 2], facts[:, 0])
    neg = corrupt_ids(num_entities or kg.num_entities, true, n_neg, rng)
    return LossBatch(facts, sides, neg)


def batch_scores(ctx: EncoderContext, P: dict[str, Tensor], time_params: ModelParams, batch: LossBatch,
                 time_offset: float = 1.0) -> tuple[Tensor, Tensor]:
    """Scores of positives (P,) and negatives (P, n) with one shared encoding pass."""
    f, sides, neg = batch.facts, batch.sides, batch.negatives
    Pn, n = neg.shape
    te = f[:, 3].astype(np.float64) - time_offset
    # subject / object ids for negatives
    neg_s = np.where(sides[:, None] == 1, neg, f[:, [0]]).ravel()
    neg_o = np.where(sides[:, None] == 0, neg, f[:, [2]]).ravel()
    te_rep = np.repeat(te, n)
    ents = np.concatenate([f[:, 0], f[:, 2], neg_s, neg_o])
    times = np.concatenate([te, te, te_rep, te_rep])
    keys = np.stack([ents.astype(np.float64), times], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    H = encode_batch(ctx, P, time_params, uniq[:, 0].astype(np.int64), uniq[:, 1])
    i_s, i_o = inv[:Pn], inv[Pn:2 * Pn]
    i_ns, i_no = inv[2 * Pn:2 * Pn + Pn * n], inv[2 * Pn + Pn * n:]
    rel = f[:, 1]
    pos = score_rows(nk.take(H, i_s), nk.take(P["relation"], rel), nk.take(H, i_o))
    negs = score_rows(nk.take(H, i_ns), nk.take(P["relation"], np.repeat(rel, n)), nk.take(H, i_no))
    return pos, nk.reshape(negs, (Pn, n))


def batch_loss(ctx: EncoderContext, P: dict[str, Tensor], time_params: ModelParams, batch: LossBatch,
               gamma: float, time_offset: float = 1.0) -> Tensor:
    pos, neg = batch_scores(ctx, P, time_params, batch, time_offset)
    return hinge_loss(pos, neg, gamma)


def loss_and_grads(ctx: EncoderContext, params: ModelParams, batch: LossBatch, gamma: float,
                   time_offset: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
    with nk.Tape() as tape:
        P = param_tensors(params, tape)
        root = batch_loss(ctx, P, params, batch, gamma, time_offset)
    g = nk.backward(tape, root)
    return float(root.value), {k: g[t] for k, t in P.items()}


# -- ranking ---------------------------------------------------------------

class FilterIndex:
    """Known true facts indexed for filtered ranking.

    Time-agnostic by default: a candidate is filtered if (s, r, o) occurs at any
    time. With ``time_aware`` only same-timestamp facts are filtered.
    """

    def __init__(self, quads: Iterable, time_aware: bool = False):
        self.time_aware = time_aware
        self.by_sr: dict[tuple, set[int]] = defaultdict(set)
        self.by_ro: dict[tuple, set[int]] = defaultdict(set)
        for s, r, o, t in (tuple(int(v) for v in q) for q in quads):
            k = (t,) if time_aware else ()
            self.by_sr[(s, r) + k].add(o)
            self.by_ro[(r, o) + k].add(s)

    @classmethod
    def from_kg(cls, kg: TemporalKG, time_aware: bool = False) -> "FilterIndex":
        return cls(kg.quads.tolist(), time_aware)

    def known(self, query, slot: str) -> set[int]:
        s, r, o, t = query
        k = (t,) if self.time_aware else ()
        if slot == OBJECT:
            return self.by_sr.get((s, r) + k, set())
        return self.by_ro.get((r, o) + k, set())


@dataclass
class RankedQuery:
    query: tuple[int, int, int, int]
    slot: str
    true_entity: int
    rank: int
    candidate_count: int
    raw_rank: int = 0
    interval: int | None = None


def filtered_rank(scores: np.ndarray, true_id: int, filtered: Iterable[int] = ()) -> tuple[int, int, int]:
    """(filtered rank, candidate count, raw rank); ties count against the true entity."""
    scores = np.asarray(scores)
    if not (0 <= true_id < len(scores)):
        raise KeyError(f"true entity {true_id} not among {len(scores)} candidates")
    st = scores[true_id]
    beats = scores >= st
    beats[true_id] = False
    raw = 1 + int(beats.sum())
    keep = np.ones(len(scores), dtype=bool)
    drop = [c for c in filtered if c != true_id]
    keep[drop] = False
    rank = 1 + int((beats & keep).sum())
    return rank, int(keep.sum()), raw


class CandidateScorer:
    """Scores every entity in a masked slot with one parameter snapshot.

    All-entity encodings are cached per encoding time, so several queries at
    the same timestamp share one encoder pass.
    """

    def __init__(self, ctx: EncoderContext, params: ModelParams, time_offset: float = 1.0):
        self.ctx = ctx
        self.params = params
        self.time_offset = time_offset
        self._P = param_tensors(params)
        self._reprs: dict[float, np.ndarray] = {}

    def reprs(self, t: float) -> np.ndarray:
        te = float(t) - self.time_offset
        H = self._reprs.get(te)
        if H is None:
            n = self.params.entity.shape[0]
            H = encode_batch(self.ctx, self._P, self.params, np.arange(n), np.full(n, te)).value
            self._reprs[te] = H
        return H

    def scores(self, query, slot: str) -> np.ndarray:
        s, r, o, t = (int(x) for x in query)
        H = self.reprs(t)
        hr = self.params.relation[r]
        if slot == OBJECT:
            return score_rows(Tensor(np.broadcast_to(H[s], H.shape)), Tensor(hr), Tensor(H)).value
        return score_rows(Tensor(H), Tensor(hr), Tensor(np.broadcast_to(H[o], H.shape))).value


def rank_query(scorer: CandidateScorer, query, slot: str, known_true: FilterIndex | set,
               interval: int | None = None) -> RankedQuery:
    """Filtered rank of the true entity of ``query`` in its masked ``slot``."""
    if slot not in (OBJECT, SUBJECT):
        raise ValueError(f"slot must be {OBJECT!r} or {SUBJECT!r}")
    q = tuple(int(x) for x in query)
    true_id = q[2] if slot == OBJECT else q[0]
    scores = scorer.scores(q, slot)
    if isinstance(known_true, FilterIndex):
        filt = known_true.known(q, slot)
    else:
        s, r, o, t = q
        if slot == OBJECT:
            filt = {c for c in range(len(scores)) if (s, r, c) in known_true or (s, r, c, t) in known_true}
        else:
            filt = {c for c in range(len(scores)) if (c, r, o) in known_true or (c, r, o, t) in known_true}
    rank, count, raw = filtered_rank(scores, true_id, filt)
    return RankedQuery(q, slot, true_id, rank, count, raw, interval)


# -- metrics ----------------------------------------------------------------

@dataclass
class MetricsReport:
    mrr: float
    hits: dict[int, float]
    query_count: int
    per_interval: dict[int, dict] = field(default_factory=dict)
    per_direction: dict[str, dict] = field(default_factory=dict)

    def summary(self) -> dict:
        return {"mrr": self.mrr, "hits1": self.hits[1], "hits3": self.hits[3], "hits10": self.hits[10],
                "query_count": self.query_count}

    def to_dict(self, directions: bool = False) -> dict:
        d = self.summary()
        d["per_interval"] = {str(k): v for k, v in sorted(self.per_interval.items())}
        if directions:
            d["per_direction"] = self.per_direction
        return d

    def to_json(self, directions: bool = False) -> str:
        return json.dumps(self.to_dict(directions), indent=2, sort_keys=True) + "\n"

    def csv_row(self, **prefix) -> dict:
        row = dict(prefix)
        row.update(self.summary())
        return row


CSV_FIELDS = ["mrr", "hits1", "hits3", "hits10", "query_count"]

_SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["mrr", "hits1", "hits3", "hits10", "query_count"],
    "properties": {
        "mrr": {"type": "number", "minimum": 0, "maximum": 1},
        "hits1": {"type": "number", "minimum": 0, "maximum": 1},
        "hits3": {"type": "number", "minimum": 0, "maximum": 1},
        "hits10": {"type": "number", "minimum": 0, "maximum": 1},
        "query_count": {"type": "integer", "minimum": 0},
    },
}

METRICS_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "fstkg metrics report",
    "type": "object",
    "required": ["mrr", "hits1", "hits3", "hits10", "per_interval", "query_count"],
    "properties": {
        **_SUMMARY_SCHEMA["properties"],
        "per_interval": {"type": "object", "patternProperties": {"^[0-9]+$": _SUMMARY_SCHEMA},
                         "additionalProperties": False},
        "per_direction": {"type": "object", "additionalProperties": _SUMMARY_SCHEMA},
    },
}


def _summarise(ranks: np.ndarray) -> dict:
    rr = 1.0 / ranks
    out = {"mrr": float(rr.mean()), "query_count": int(len(ranks))}
    for k in HITS_AT:
        out[f"hits{k}"] = float(np.mean(ranks <= k))
    return out


def aggregate_metrics(ranked: Sequence[RankedQuery]) -> MetricsReport:
    if not ranked:
        raise ValueError("no ranked queries to aggregate")
    ranks = np.array([q.rank for q in ranked], dtype=np.float64)
    top = _summarise(ranks)
    per_iv: dict[int, list] = defaultdict(list)
    per_dir: dict[str, list] = defaultdict(list)
    for q in ranked:
        if q.interval is not None:
            per_iv[q.interval].append(q.rank)
        per_dir[q.slot].append(q.rank)
    return MetricsReport(
        mrr=top["mrr"],
        hits={k: top[f"hits{k}"] for k in HITS_AT},
        query_count=top["query_count"],
        per_interval={m: _summarise(np.array(v, dtype=np.float64)) for m, v in sorted(per_iv.items())},
        per_direction={d: _summarise(np.array(v, dtype=np.float64)) for d, v in sorted(per_dir.items())},
    )


def metrics_csv(rows: Sequence[dict], fields: Sequence[str] | None = None) -> str:
    fields = list(fields or rows[0].keys())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
