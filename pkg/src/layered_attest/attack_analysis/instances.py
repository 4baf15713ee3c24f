"""Seeded random measurement graphs and adversary specs, for cross-checking."""

from __future__ import annotations

import random

from .model import (
    WINDOW_BOOT_BOUNDARY,
    WINDOW_UNRESTRICTED,
    AdversarySpec,
    CardinalityRule,
    MeasurementGraph,
    MsEvent,
)


def random_instance(
    seed: int, max_components: int = 5, max_events: int = 6, max_budget: int = 2
) -> tuple[MeasurementGraph, AdversarySpec]:
    rng = random.Random(seed)
    comps = [f"c{k}" for k in range(rng.randint(2, max_components))]
    events: list[MsEvent] = []
    for _ in range(rng.randint(1, max_events)):
        m, t = rng.sample(comps, 2)
        ev = MsEvent(m, t)
        if ev not in events:
            events.append(ev)
    order = set()
    for i, a in enumerate(events):
        for b in events[i + 1 :]:
            if rng.random() < 0.3:
                order.add((a, b))
    nboot = rng.randint(0, len(events))
    boot = frozenset(events[:nboot])
    depends = set()
    for a in comps:
        for b in comps:
            # acyclic: only depend on lower-numbered components
            if a > b and rng.random() < 0.25:
                depends.add((a, b))
    graph = MeasurementGraph(frozenset(comps), tuple(events), frozenset(order), frozenset(depends), boot)

    forbidden = frozenset(c for c in comps if rng.random() < 0.15)
    precedence = frozenset(
        (a, b) for a in comps for b in comps if a != b and rng.random() < 0.08
    )
    cardinality = frozenset()
    if rng.random() < 0.3:
        members = frozenset(rng.sample(comps, min(len(comps), rng.randint(2, 3))))
        cardinality = frozenset({CardinalityRule(members, rng.randint(0, 1))})
    dropped = frozenset(p for p in depends if rng.random() < 0.2)
    spec = AdversarySpec(
        forbidden,
        precedence,
        rng.choice([WINDOW_UNRESTRICTED, WINDOW_BOOT_BOUNDARY]),
        cardinality,
        rng.randint(1, max_budget),
        dropped,
    )
    return graph, spec
