"""Budgeted, time-bounded breadth-first sampling of temporal neighbors."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

from .kgstore import TemporalKG


class NeighborEvent(NamedTuple):
    entity: int
    relation: int
    time: int
    hop: int


@dataclass(frozen=True)
class NeighborSet:
    target: int
    query_time: float
    events: tuple[NeighborEvent, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.events)


def sample_temporal_neighbors(kg: TemporalKG, entity: int, t: float, budget: int,
                              time_bound: float = math.inf) -> NeighborSet:
    """BFS from ``entity`` collecting up to ``budget`` events with t - time_bound < time <= t.

    Each dequeued entity's qualifying events are scanned most recent first and
    the counterpart of each event is recorded (and enqueued once). Events whose
    counterpart is the target itself are skipped.
    """
    if not (0 <= entity < kg.num_entities):
        raise KeyError(f"unknown entity id {entity}")
    if budget < 0 or time_bound < 0:
        raise ValueError("budget and time_bound must be non-negative")
    lo = t - time_bound
    out: list[NeighborEvent] = []
    queue = deque([(entity, 1)])
    visited = {entity}
    while len(out) < budget and queue:
        e, hop = queue.popleft()
        for ev in reversed(kg.events_between(e, lo, t)):
            if ev.other == entity:
                continue
            out.append(NeighborEvent(ev.other, ev.relation, ev.time, hop))
            if ev.other not in visited:
                visited.add(ev.other)
                queue.append((ev.other, hop + 1))
            if len(out) >= budget:
                break
    return NeighborSet(entity, t, tuple(out))
