"""Exhaustive reference enumerator for small instances.

Walks every interleaving of measurements and adversary moves one step at a
time, with its own detection check and its own minimality filter. Only used
to cross-check the goal-directed search.
"""

from __future__ import annotations

import itertools
from collections import Counter
from typing import Optional

from .model import AdversarySpec, AnalysisError, MeasurementGraph

MAX_COMPONENTS = 6
MAX_EVENTS = 8
MAX_BUDGET = 2


class InstanceTooLarge(AnalysisError):
    pass


def _orders(graph: MeasurementGraph):
    before = set(graph.order)
    boot = set(graph.boot_events)
    for perm in itertools.permutations(graph.events):
        pos = {e: k for k, e in enumerate(perm)}
        if all(pos[a] < pos[b] for a, b in before) and all(
            pos[a] < pos[b] for a in boot for b in perm if b not in boot
        ):
            yield perm


def _depends_on(graph: MeasurementGraph, dropped, comp: str) -> set[str]:
    edges = [(a, b) for a, b in graph.depends if (a, b) not in dropped]
    out: set[str] = set()
    frontier = {comp}
    while frontier:
        nxt = {b for a, b in edges if a in frontier} - out
        out |= nxt
        frontier = nxt
    return out


def brute_force_oracle(
    graph: MeasurementGraph,
    spec: AdversarySpec,
    query_target: Optional[str] = None,
    at_end: bool = False,
) -> dict[frozenset, tuple[str, ...]]:
    """Minimal adversary-event multisets (as frozensets of (step, count)) with a witness each."""
    if len(graph.components) > MAX_COMPONENTS or len(graph.events) > MAX_EVENTS or spec.budget > MAX_BUDGET:
        raise InstanceTooLarge(
            f"{len(graph.components)} components, {len(graph.events)} events, budget {spec.budget}"
        )
    comps = sorted(graph.components)
    deps = {c: _depends_on(graph, spec.dropped_depends, c) for c in comps}
    nboot = len(graph.boot_events)
    restricted = spec.window != "unrestricted"
    # only these parts of the history can affect later legality
    prereqs = frozenset(b for _, b in spec.precedence)
    counted = frozenset().union(*(r.members for r in spec.cardinality))
    results: dict[frozenset, tuple[str, ...]] = {}

    # keyed on the remaining measurements, so extensions sharing a suffix share work
    memo: dict = {}

    def walk(rest, pos, bad, used, ever, windowed, hit):
        key = (rest, pos, bad, used, ever, windowed, hit)
        if key in memo:
            return memo[key]
        found: dict[frozenset, tuple[str, ...]] = {}

        def keep(ms, steps):
            if ms not in found or steps < found[ms]:
                found[ms] = steps

        if not rest:
            ok = (query_target in bad if query_target else bool(bad)) if at_end else hit
            if ok:
                keep(frozenset(), ())
        else:
            ev = rest[0]
            caught = ev.target in bad and ev.measurer not in bad and not (deps[ev.measurer] & bad)
            if not caught:
                got = hit or (ev.target in bad and (query_target is None or ev.target == query_target))
                for ms, steps in walk(rest[1:], pos + 1, bad, used, ever, windowed, got).items():
                    keep(ms, (ev.name,) + steps)
        for k, c in enumerate(comps):
            if used[k] >= spec.budget:
                continue
            bumped = used[:k] + (used[k] + 1,) + used[k + 1 :]
            if c in bad:
                step = f"repair({c})"
                sub = walk(rest, pos, bad - {c}, bumped, ever, windowed, hit)
            else:
                if c in spec.forbidden:
                    continue
                if restricted and pos not in (0, nboot):
                    continue
                if any(a == c and b not in ever for a, b in spec.precedence):
                    continue
                win = windowed | {c} if pos in (0, nboot) else windowed
                if any(len(win & r.members) > r.limit for r in spec.cardinality):
                    continue
                step = f"corrupt({c})"
                sub = walk(rest, pos, bad | {c}, bumped, (ever | {c}) & prereqs, win & counted, hit)
            for ms, steps in sub.items():
                counts = Counter(dict(ms))
                counts[step] += 1
                keep(frozenset(counts.items()), (step,) + steps)
        # a superset reachable from the same state is never minimal overall
        found = {ms: w for ms, w in found.items() if not any(_smaller(o, ms) for o in found)}
        memo[key] = found
        return found

    for order in _orders(graph):
        start = walk(order, 0, frozenset(), (0,) * len(comps), frozenset(), frozenset(), False)
        for ms, steps in start.items():
            if ms not in results or steps < results[ms]:
                results[ms] = steps

    return {ms: w for ms, w in results.items() if not any(_smaller(o, ms) for o in results)}


def _smaller(a: frozenset, b: frozenset) -> bool:
    cb = dict(b)
    return a != b and all(cb.get(s, 0) >= n for s, n in a)
