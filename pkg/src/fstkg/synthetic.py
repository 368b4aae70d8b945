"""Synthetic temporal KG with block structure whose relational rule drifts over time.

Entities live in ``blocks`` blocks on a ring of positions. Relation i sends a
subject in block A to an object in block (A + i + floor(t / drift_period)) mod
blocks, so the block permutation rotates every drift period. Objects are drawn
among active entities of the target block with a von Mises preference for
positions close to the subject's (``locality`` = 0 gives uniform draws).
Founding entities exist from t = 0; the rest arrive over the horizon.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .kgstore import TemporalKG, from_quads

_NAME = re.compile(r"^b(\d+)e(\d+)$")


@dataclass
class SyntheticSpec:
    entities_per_block: int = 30
    blocks: int = 2
    relations: int = 2
    event_rate: float = 0.3  # expected facts emitted per active entity per step
    horizon: int = 100
    drift_period: int = 25
    arrival_rate: float = 0.3  # expected new entities per step
    locality: float = 6.0
    seed: int = 0

    def validate(self):
        for k in ("entities_per_block", "blocks", "relations", "horizon", "drift_period"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.drift_period > self.horizon:
            raise ValueError("drift period exceeds the time horizon")
        if self.event_rate <= 0 or self.arrival_rate < 0 or self.locality < 0:
            raise ValueError("rates must be positive and locality non-negative")


def entity_name(block: int, idx: int) -> str:
    return f"b{block}e{idx:03d}"


def block_of(name: str) -> int:
    m = _NAME.match(name)
    if not m:
        raise ValueError(f"{name!r} is not a synthetic entity name")
    return int(m.group(1))


def target_block(spec: SyntheticSpec, block: int, relation: int, t: int) -> int:
    return (block + relation + t // spec.drift_period) % spec.blocks


def _arrivals(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.entities_per_block * spec.blocks
    n_new = min(n - spec.blocks * 2, int(round(spec.arrival_rate * spec.horizon)))
    n_new = max(n_new, 0)
    arrive = np.zeros(n, dtype=np.int64)
    # founders spread evenly over blocks; everyone else arrives at a uniform time
    order = rng.permutation(n)
    founders = set()
    for b in range(spec.blocks):
        members = [e for e in order if e % spec.blocks == b]
        founders.update(members[:2])
    late = [e for e in order if e not in founders][:n_new]
    arrive[late] = rng.integers(1, spec.horizon, size=len(late))
    return arrive


def generate_synthetic(spec: SyntheticSpec) -> TemporalKG:
    """Generate the drifting benchmark; a pure function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    B, n_per = spec.blocks, spec.entities_per_block
    n = B * n_per
    block = np.arange(n) % B
    idx = np.arange(n) // B
    pos = idx / n_per
    arrive = _arrivals(spec, rng)
    quads = []
    for t in range(spec.horizon):
        active = np.flatnonzero(arrive <= t)
        for a in active:
            k = rng.poisson(spec.event_rate)
            for _ in range(k):
                r = int(rng.integers(spec.relations))
                tb = target_block(spec, int(block[a]), r, t)
                cands = active[(block[active] == tb) & (active != a)]
                if not len(cands):
                    continue
                w = np.exp(spec.locality * np.cos(2 * math.pi * (pos[cands] - pos[a])))
                o = int(rng.choice(cands, p=w / w.sum()))
                quads.append((entity_name(int(block[a]), int(idx[a])), f"r{r}",
                              entity_name(int(block[o]), int(idx[o])), t))
    return from_quads(quads)


def audit_synthetic(kg: TemporalKG, spec: SyntheticSpec) -> list[int]:
    """Indices of facts that break the block rule (empty for a consistent graph)."""
    bad = []
    names, rels = kg.entities.names, kg.relations.names
    for i, (s, r, o, t) in enumerate(kg.quads.tolist()):
        ri = int(rels[r][1:])
        if block_of(names[o]) != target_block(spec, block_of(names[s]), ri, t):
            bad.append(i)
    return bad
