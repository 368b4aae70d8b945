"""Temporal knowledge-graph storage, ingestion, chronological splits and few-shot tasks."""
from __future__ import annotations

import bisect
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# direction flags in adjacency entries
SUBJ_SIDE = 0  # the owning entity is the subject of the fact
OBJ_SIDE = 1  # the owning entity is the object of the fact

ROLES = ("background", "meta_train", "meta_val", "meta_test")


class KGParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class TaskConstructionError(ValueError):
    pass


class Vocab:
    """Dense id <-> name mapping, ids assigned in first-appearance order."""

    def __init__(self, names: Iterable[str] = ()):
        self.names: list[str] = []
        self.index: dict[str, int] = {}
        for n in names:
            self.add(n)

    def add(self, name: str) -> int:
        idx = self.index.get(name)
        if idx is None:
            idx = len(self.names)
            self.index[name] = idx
            self.names.append(name)
        return idx

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name: str) -> int:
        return self.index[name]

    def name(self, idx: int) -> str:
        return self.names[idx]


@dataclass(frozen=True)
class Event:
    """One adjacency entry seen from an owning entity."""
    other: int
    relation: int
    time: int
    side: int  # SUBJ_SIDE if the owner is the subject
    fact: int  # index into TemporalKG.quads


class TemporalKG:
    """Immutable store of timestamped facts (s, r, o, t).

    ``quads`` is an int64 array of shape (n, 4) sorted by timestamp with ties in
    input order. Per-entity adjacency holds one entry per endpoint of every fact
    (a self-loop contributes two entries to the same entity).
    """

    def __init__(self, entities: Vocab, relations: Vocab, quads: np.ndarray):
        quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
        order = np.argsort(quads[:, 3], kind="stable")
        self.entities = entities
        self.relations = relations
        self.quads = quads[order]
        self.quads.setflags(write=False)
        if len(self.quads):
            if self.quads[:, [0, 2]].max() >= len(entities) or self.quads[:, 1].max() >= len(relations):
                raise ValueError("quadruple references an id outside the vocabulary")
            if self.quads[:, 3].min() < 0:
                raise ValueError("negative timestamp")
        self._build_adjacency()

    def _build_adjacency(self):
        n_ent = len(self.entities)
        adj: list[list[Event]] = [[] for _ in range(n_ent)]
        # quads already time-sorted, so appending keeps every list sorted
        for i, (s, r, o, t) in enumerate(self.quads.tolist()):
            adj[s].append(Event(o, r, t, SUBJ_SIDE, i))
            adj[o].append(Event(s, r, t, OBJ_SIDE, i))
        self._adj = [tuple(a) for a in adj]
        self._adj_times = [[e.time for e in a] for a in adj]
        first = np.full(n_ent, -1, dtype=np.int64)
        for e, a in enumerate(adj):
            if a:
                first[e] = a[0].time
        self.first_seen = first

    # -- accessors -------------------------------------------------------
    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def __len__(self):
        return len(self.quads)

    def adjacency(self, entity: int) -> tuple[Event, ...]:
        return self._adj[entity]

    def events_between(self, entity: int, lo: float, hi: float) -> Sequence[Event]:
        """Events of ``entity`` with lo < time <= hi, chronological order.

        Located by bisection so nothing outside the window is touched.
        """
        times = self._adj_times[entity]
        i = bisect.bisect_right(times, lo) if lo > -math.inf else 0
        j = bisect.bisect_right(times, hi) if hi < math.inf else len(times)
        return self._adj[entity][i:j]

    def facts_of(self, entity: int) -> list[int]:
        """Fact indices involving ``entity`` in chronological (then file) order, self-loops once."""
        seen = []
        last = -1
        for ev in self._adj[entity]:
            if ev.fact != last:
                seen.append(ev.fact)
            last = ev.fact
        return seen

    def time_span(self) -> tuple[int, int]:
        if not len(self.quads):
            raise ValueError("empty knowledge graph has no time span")
        return int(self.quads[0, 3]), int(self.quads[-1, 3])

    def subgraph(self, keep: np.ndarray) -> "TemporalKG":
        """KG with the same vocabularies restricted to facts where ``keep`` is true."""
        keep = np.asarray(keep, dtype=bool)
        return TemporalKG(self.entities, self.relations, self.quads[keep])

    def triples(self, time_aware: bool = False) -> set[tuple]:
        cols = [0, 1, 2, 3] if time_aware else [0, 1, 2]
        return set(map(tuple, self.quads[:, cols].tolist()))


# -- ingestion ------------------------------------------------------------

def ingest_tsv(source) -> TemporalKG:
    """Parse ``subject<TAB>relation<TAB>object<TAB>time`` records.

    ``source`` may be a path, a binary/text stream or raw bytes. Blank lines and
    ``#`` comments are skipped.
    """
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if isinstance(source, str) or hasattr(source, "__fspath__"):
        with open(source, "rb") as fh:
            return ingest_tsv(fh)

    ents, rels = Vocab(), Vocab()
    rows = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        line = line.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise KGParseError(lineno, f"expected 4 tab-separated fields, got {len(fields)}")
        s, r, o, t = fields
        try:
            ts = int(t)
        except ValueError:
            raise KGParseError(lineno, f"timestamp {t!r} is not an integer") from None
        if ts < 0:
            raise KGParseError(lineno, f"negative timestamp {ts}")
        si = ents.add(s)
        ri = rels.add(r)
        oi = ents.add(o)
        rows.append((si, ri, oi, ts))
    return TemporalKG(ents, rels, np.array(rows, dtype=np.int64).reshape(-1, 4))


def write_tsv(kg: TemporalKG, dest) -> None:
    if isinstance(dest, str) or hasattr(dest, "__fspath__"):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            return write_tsv(kg, fh)
    E, R = kg.entities, kg.relations
    for s, r, o, t in kg.quads.tolist():
        dest.write(f"{E.name(s)}\t{R.name(r)}\t{E.name(o)}\t{t}\n")


def from_quads(quads: Iterable[tuple[str, str, str, int]]) -> TemporalKG:
    """Build a KG from named quadruples (helper for tests and generators)."""
    buf = io.StringIO()
    for s, r, o, t in quads:
        buf.write(f"{s}\t{r}\t{o}\t{int(t)}\n")
    buf.seek(0)
    return ingest_tsv(buf)


# -- splitting ------------------------------------------------------------

@dataclass(frozen=True)
class SplitAssignment:
    boundaries: tuple[int, int, int]
    roles: np.ndarray  # per entity index into ROLES; -1 for entities without facts

    def entities_with(self, role: str) -> list[int]:
        k = ROLES.index(role)
        return np.flatnonzero(self.roles == k).tolist()

    def role_of(self, entity: int) -> str:
        return ROLES[self.roles[entity]]

    def counts(self) -> dict[str, int]:
        return {r: int(np.sum(self.roles == i)) for i, r in enumerate(ROLES)}


def chronological_split(kg: TemporalKG, ratios: Sequence[float] = (0.4, 0.25, 0.1, 0.25)) -> SplitAssignment:
    """Cut the time axis at cumulative ratio points; roles follow first appearance.

    Periods are half-open on the left: an entity first seen exactly at a
    boundary belongs to the earlier period.
    """
    if len(ratios) != 4 or any(r < 0 for r in ratios):
        raise ValueError("need four non-negative ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios sum to {sum(ratios)}, expected 1")
    if not len(kg):
        raise ValueError("cannot split an empty knowledge graph")
    t_min, t_max = kg.time_span()
    if t_min == t_max:
        raise ValueError("degenerate time span: all facts share one timestamp")
    span = t_max - t_min
    cum = np.cumsum(ratios)[:3]
    bounds = tuple(int(math.floor(t_min + c * span + 1e-9)) for c in cum)
    # with ratio 1 in the last slot-free position the final bound equals t_max
    first = kg.first_seen
    roles = np.full(kg.num_entities, -1, dtype=np.int64)
    seen = first >= 0
    roles[seen] = np.searchsorted(np.array(bounds), first[seen], side="left")
    return SplitAssignment(bounds, roles)


def write_split_manifest(kg: TemporalKG, split: SplitAssignment, dest) -> None:
    if isinstance(dest, str) or hasattr(dest, "__fspath__"):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            return write_split_manifest(kg, split, fh)
    dest.write(f"# boundaries\t{split.boundaries[0]}\t{split.boundaries[1]}\t{split.boundaries[2]}\n")
    for e, name in enumerate(kg.entities.names):
        role = ROLES[split.roles[e]] if split.roles[e] >= 0 else "unseen"
        dest.write(f"{name}\t{role}\n")


def read_split_manifest(kg: TemporalKG, source) -> SplitAssignment:
    with open(source, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    head = lines[0].split("\t")
    bounds = tuple(int(x) for x in head[1:4])
    roles = np.full(kg.num_entities, -1, dtype=np.int64)
    for line in lines[1:]:
        name, role = line.split("\t")
        if role != "unseen":
            roles[kg.entities[name]] = ROLES.index(role)
    return SplitAssignment(bounds, roles)


def new_entities(kg: TemporalKG, t_lo: int, t_hi: int) -> set[int]:
    """Entities whose earliest fact falls in (t_lo, t_hi]."""
    if t_lo >= t_hi:
        raise ValueError(f"empty window ({t_lo}, {t_hi}]")
    f = kg.first_seen
    return set(np.flatnonzero((f > t_lo) & (f <= t_hi)).tolist())


# -- few-shot tasks -------------------------------------------------------

@dataclass
class FewShotTask:
    entity: int
    support: list[int]  # fact indices
    query_intervals: list[list[int]]
    interval_bounds: list[float] = field(default_factory=list)

    @property
    def query(self) -> list[int]:
        return [f for iv in self.query_intervals for f in iv]

    def facts(self) -> list[int]:
        return self.support + self.query


def build_task(kg: TemporalKG, entity: int, K: int, M: int, facts: Sequence[int] | None = None) -> FewShotTask:
    """First ``K`` facts form the support set; the rest are cut into ``M`` equal-width time bins.

    ``facts`` optionally restricts which of the entity's facts are eligible
    (still ordered chronologically, ties by file order).
    """
    if M < 1 or K < 1:
        raise ValueError("K and M must be >= 1")
    if facts is None:
        facts = kg.facts_of(entity)
    else:
        facts = sorted(facts)  # quads are time-sorted with stable ties
    if len(facts) <= K:
        raise TaskConstructionError(f"entity {entity} has {len(facts)} facts, need more than K={K}")
    support = list(facts[:K])
    rest = list(facts[K:])
    times = kg.quads[rest, 3]
    lo, hi = int(times[0]), int(times[-1])
    if hi == lo:
        bounds = [float(lo)] + [float(hi)] * M
        intervals = [rest] + [[] for _ in range(M - 1)]
        # everything falls in the first bin when the query span collapses
        return FewShotTask(entity, support, intervals, bounds)
    width = (hi - lo) / M
    bounds = [lo + i * width for i in range(M)] + [float(hi)]
    intervals: list[list[int]] = [[] for _ in range(M)]
    for f, t in zip(rest, times.tolist()):
        # (b_{m-1}, b_m]; the first bin also takes t == lo
        m = int(np.searchsorted(bounds[1:], t, side="left"))
        intervals[min(m, M - 1)].append(f)
    return FewShotTask(entity, support, intervals, bounds)
