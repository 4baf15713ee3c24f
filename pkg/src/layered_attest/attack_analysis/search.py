"""Goal-directed search for minimal adversary schedules.

For each linear extension of the measurement order the search starts from a
single requirement (the query target is corrupted at one of its
measurements) and repeatedly asks which component must also be corrupted to
keep the first failing measurement passing. A requirement set is turned into
concrete corrupt/repair intervals using the tightest placement the window
rule allows, so every attack the adversary has is dominated by one the
search constructs. Candidate schedules are replayed before being accepted.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Iterator, Optional

from .model import (
    QUERY_AT_END,
    QUERY_AT_MEASUREMENT,
    WINDOW_UNRESTRICTED,
    AdversarySpec,
    AnalysisError,
    AttackTrace,
    MeasurementGraph,
    MsEvent,
    MultisetKey,
    UnknownComponent,
    canonical_sort,
    is_submultiset,
    pass_reason,
    window_slots,
)

log = logging.getLogger(__name__)

MAX_BUDGET = 6


class BudgetTooLarge(AnalysisError):
    pass


@dataclass(frozen=True)
class Interval:
    start: int  # slot of the corrupt event (slot s sits just before measurement s)
    end: Optional[int]  # slot of the repair, None when never repaired

    def covers(self, i: int) -> bool:
        return self.start <= i and (self.end is None or i < self.end)


Schedule = dict[str, tuple[Interval, ...]]


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


def check_trace(
    graph: MeasurementGraph,
    spec: AdversarySpec,
    steps: tuple[str, ...],
    query: Optional[str],
    mode: str = QUERY_AT_MEASUREMENT,
) -> Optional[tuple[str, ...]]:
    """Replay ``steps``; return per-measurement pass reasons if it is an attack, else None."""
    boot_count = len(graph.boot_events)
    windows = window_slots(graph)
    bad: set[str] = set()
    events_used: dict[str, int] = {}
    ever_corrupted: set[str] = set()
    in_window: set[str] = set()
    done = 0
    hit = False
    reasons = []
    by_name = {e.name: e for e in graph.events}
    for step in steps:
        if step.startswith("ms("):
            ev = by_name[step]
            if ev.target in bad and not (ev.measurer in bad or graph.deps_closure(ev.measurer) & bad):
                return None
            if ev.target in bad and (query is None or ev.target == query):
                hit = True
            reasons.append(f"{ev.name}: {pass_reason(ev, bad, graph)}")
            done += 1
            continue
        kind, comp = step[:-1].split("(", 1)
        events_used[comp] = events_used.get(comp, 0) + 1
        if events_used[comp] > spec.budget:
            return None
        if kind == "corrupt":
            if comp in bad or comp in spec.forbidden:
                return None
            if spec.window != WINDOW_UNRESTRICTED and done not in (0, boot_count):
                return None
            if any(a == comp and b not in ever_corrupted for a, b in spec.precedence):
                return None
            bad.add(comp)
            ever_corrupted.add(comp)
            if done in windows:
                in_window.add(comp)
            for rule in spec.cardinality:
                if len(rule.members & in_window) > rule.limit:
                    return None
        elif kind == "repair":
            if comp not in bad:
                return None
            bad.discard(comp)
        else:
            return None
    if done != len(graph.events):
        return None
    if mode == QUERY_AT_END:
        hit = bool(bad) if query is None else query in bad
    return tuple(reasons) if hit else None


# ---------------------------------------------------------------------------
# search over one linear extension
# ---------------------------------------------------------------------------


def _compositions(items: list[int], k: int) -> Iterator[list[list[int]]]:
    """Split ``items`` into ``k`` non-empty contiguous runs."""
    for cuts in itertools.combinations(range(1, len(items)), k - 1):
        bounds = (0,) + cuts + (len(items),)
        yield [items[bounds[j] : bounds[j + 1]] for j in range(k)]


class _ExtensionSearch:
    def __init__(
        self,
        graph: MeasurementGraph,
        spec: AdversarySpec,
        ext: tuple[MsEvent, ...],
        query: Optional[str],
        mode: str,
    ) -> None:
        self.graph = graph
        self.spec = spec
        self.ext = ext
        self.query = query
        self.mode = mode
        self.n = len(ext)
        self.boundary = len(graph.boot_events)
        self.card_window = window_slots(graph)
        if spec.window == WINDOW_UNRESTRICTED:
            self.allowed = list(range(self.n + 1))
        else:
            self.allowed = sorted(self.card_window)
        self.card_members = set().union(*(r.members for r in spec.cardinality)) if spec.cardinality else set()
        self.covers = []
        for ev in ext:
            cands = {ev.measurer} | graph.deps_closure(ev.measurer)
            self.covers.append(sorted(cands - spec.forbidden))
        self.max_groups = (spec.budget + 1) // 2

    # -- seeds ----------------------------------------------------------------

    def seeds(self) -> Iterator[frozenset[tuple[str, int]]]:
        if self.mode == QUERY_AT_END:
            targets = [self.query] if self.query is not None else sorted(self.graph.components)
            for t in targets:
                if t not in self.spec.forbidden:
                    yield frozenset({(t, self.n)})
            return
        for i, ev in enumerate(self.ext):
            if (self.query is None or ev.target == self.query) and ev.target not in self.spec.forbidden:
                yield frozenset({(ev.target, i)})

    # -- placements -------------------------------------------------------------

    def _starts(self, comp: str, lo_slot: int, hi_slot: int) -> list[int]:
        ok = [a for a in self.allowed if lo_slot <= a <= hi_slot]
        if not ok:
            return []
        out = {ok[-1]}
        if comp in self.card_members:
            outside = [a for a in ok if a not in self.card_window]
            if outside:
                out.add(outside[-1])
        return sorted(out)

    def _component_options(self, comp: str, idxs: list[int]) -> Iterator[tuple[Interval, ...]]:
        at_end = self.n in idxs
        for k in range(1, min(self.max_groups, len(idxs)) + 1):
            for groups in _compositions(idxs, k):
                for last_repaired in (False, True):
                    if at_end and last_repaired:
                        continue
                    if 2 * k - (0 if last_repaired else 1) > self.spec.budget:
                        continue
                    yield from self._place(comp, groups, last_repaired, 0, ())

    def _place(
        self, comp: str, groups: list[list[int]], last_repaired: bool, floor: int, acc: tuple[Interval, ...]
    ) -> Iterator[tuple[Interval, ...]]:
        if not groups:
            yield acc
            return
        lo, hi = groups[0][0], groups[0][-1]
        last = len(groups) == 1
        end = None if last and not last_repaired else hi + 1
        for s in self._starts(comp, floor, lo):
            yield from self._place(comp, groups[1:], last_repaired, end if end is not None else s, acc + (Interval(s, end),))

    def realizations(self, req: frozenset[tuple[str, int]]) -> Iterator[Schedule]:
        need: dict[str, list[int]] = {}
        for c, i in req:
            need.setdefault(c, []).append(i)
        comps = sorted(need)
        options = [list(self._component_options(c, sorted(need[c]))) for c in comps]
        for combo in itertools.product(*options):
            yield from self._fix_precedence(dict(zip(comps, combo)), depth=0)

    def _fix_precedence(self, sched: Schedule, depth: int) -> Iterator[Schedule]:
        for a, b in sorted(self.spec.precedence):
            if a == b or a not in sched:
                continue
            s_a = sched[a][0].start
            mine = sched.get(b, ())
            if mine and mine[0].start <= s_a:
                continue
            if b in self.spec.forbidden or depth > 2 * len(self.spec.precedence) + 2:
                return
            limit = min([s_a] + ([mine[0].start] if mine else []))
            for slot in (x for x in self.allowed if x <= limit):
                variants = []
                if mine:
                    variants.append((Interval(slot, mine[0].end),) + mine[1:])
                    variants.append((Interval(slot, slot),) + mine)
                else:
                    variants.append((Interval(slot, None),))
                    variants.append((Interval(slot, slot),))
                for v in variants:
                    if sum(2 if iv.end is not None else 1 for iv in v) > self.spec.budget:
                        continue
                    yield from self._fix_precedence({**sched, b: v}, depth + 1)
            return
        yield sched

    # -- evaluation ---------------------------------------------------------------

    def corrupted_at(self, sched: Schedule, i: int) -> set[str]:
        return {c for c, ivs in sched.items() if any(iv.covers(i) for iv in ivs)}

    def first_obligation(self, sched: Schedule) -> Optional[int]:
        for i, ev in enumerate(self.ext):
            bad = self.corrupted_at(sched, i)
            if ev.target in bad and ev.measurer not in bad and not (self.graph.deps_closure(ev.measurer) & bad):
                return i
        return None

    def emit(self, sched: Schedule) -> Optional[tuple[str, ...]]:
        """Lay the schedule out as a step sequence, ordering same-slot events so
        that precedence holds; None if no such order exists."""
        per_slot: dict[int, list[tuple[str, str, int]]] = {}
        for c, ivs in sched.items():
            for j, iv in enumerate(ivs):
                per_slot.setdefault(iv.start, []).append(("corrupt", c, j))
                if iv.end is not None:
                    per_slot.setdefault(iv.end, []).append(("repair", c, j))
        steps: list[str] = []
        for slot in range(self.n + 1):
            items = per_slot.get(slot, [])
            ordered = self._order_slot(items)
            if ordered is None:
                return None
            steps += [f"{k}({c})" for k, c, _ in ordered]
            if slot < self.n:
                steps.append(self.ext[slot].name)
        return tuple(steps)

    def _order_slot(
        self, items: list[tuple[str, str, int]]
    ) -> Optional[list[tuple[str, str, int]]]:
        def rank(x: tuple[str, str, int]) -> tuple[int, int]:
            return (x[2], 0 if x[0] == "corrupt" else 1)

        def before(x: tuple[str, str, int], y: tuple[str, str, int]) -> bool:
            if x[1] == y[1]:
                return rank(x) < rank(y)
            # a prerequisite's first corruption goes ahead of its dependant's
            return (
                x[0] == y[0] == "corrupt"
                and x[2] == y[2] == 0
                and (y[1], x[1]) in self.spec.precedence
            )

        out: list[tuple[str, str, int]] = []
        left = sorted(items, key=lambda t: (t[1], t[2], t[0] == "corrupt"))
        while left:
            ready = [x for x in left if not any(before(y, x) for y in left if y is not x)]
            if not ready:
                return None
            pick = ready[0]
            out.append(pick)
            left.remove(pick)
        return out

    def run(self, found: dict[MultisetKey, AttackTrace]) -> None:
        seen: set[frozenset[tuple[str, int]]] = set()
        stack = list(self.seeds())
        while stack:
            req = stack.pop()
            if req in seen:
                continue
            seen.add(req)
            for sched in self.realizations(req):
                i = self.first_obligation(sched)
                if i is None:
                    self._record(sched, found)
                    continue
                for c in self.covers[i]:
                    if (c, i) not in req:
                        stack.append(req | {(c, i)})

    def _record(self, sched: Schedule, found: dict[MultisetKey, AttackTrace]) -> None:
        steps = self.emit(sched)
        if steps is None:
            return
        reasons = check_trace(self.graph, self.spec, steps, self.query, self.mode)
        if reasons is None:
            return
        target = self.query or _hit_target(self.graph, steps)
        trace = AttackTrace(steps, target, reasons)
        key = trace.adversary_events
        best = found.get(key)
        if best is None or trace.steps < best.steps:
            found[key] = trace


def _hit_target(graph: MeasurementGraph, steps: tuple[str, ...]) -> str:
    bad: set[str] = set()
    by_name = {e.name: e for e in graph.events}
    for step in steps:
        if step.startswith("ms("):
            ev = by_name[step]
            if ev.target in bad:
                return ev.target
        else:
            kind, comp = step[:-1].split("(", 1)
            (bad.add if kind == "corrupt" else bad.discard)(comp)
    return sorted(bad)[0] if bad else ""


def minimal(found: dict[MultisetKey, AttackTrace]) -> list[AttackTrace]:
    keys = list(found)
    keep = [k for k in keys if not any(o != k and is_submultiset(o, k) for o in keys)]
    return canonical_sort(found[k] for k in keep)


def find_attacks(
    graph: MeasurementGraph,
    spec: AdversarySpec,
    query_target: Optional[str] = None,
    query_mode: str = QUERY_AT_MEASUREMENT,
    max_budget: int = MAX_BUDGET,
) -> list[AttackTrace]:
    """Minimal attack traces, canonically sorted. ``query_target=None`` asks
    about every measured component at once."""
    if spec.budget > max_budget:
        raise BudgetTooLarge(f"budget {spec.budget} exceeds cap {max_budget}")
    if query_target is not None and query_target not in graph.components:
        raise UnknownComponent(query_target)
    g = graph.without_depends(spec.dropped_depends)
    found: dict[MultisetKey, AttackTrace] = {}
    for ext in g.linear_extensions():
        _ExtensionSearch(g, spec, ext, query_target, query_mode).run(found)
    return minimal(found)


@dataclass(frozen=True)
class AblationRow:
    removed: str
    attacks: tuple[AttackTrace, ...]


@dataclass(frozen=True)
class AblationReport:
    base_attacks: tuple[AttackTrace, ...]
    rows: tuple[AblationRow, ...]

    def reintroducing(self) -> list[str]:
        return [r.removed for r in self.rows if r.attacks]

    def render(self) -> str:
        lines = [f"base: {len(self.base_attacks)} attacks"]
        for r in self.rows:
            verdict = "reintroduces attacks" if r.attacks else "no attacks"
            lines.append(f"without [{r.removed}]: {len(r.attacks)} attacks ({verdict})")
        return "\n".join(lines) + "\n"


def constraint_ablation(
    graph: MeasurementGraph,
    base_spec: AdversarySpec,
    query_target: Optional[str] = None,
    query_mode: str = QUERY_AT_MEASUREMENT,
) -> AblationReport:
    base = find_attacks(graph, base_spec, query_target, query_mode)
    if base:
        log.warning("base spec already admits %d attacks", len(base))
    rows = tuple(
        AblationRow(name, tuple(find_attacks(graph, spec, query_target, query_mode)))
        for name, spec in base_spec.rules()
    )
    return AblationReport(tuple(base), rows)


def render_attacks(traces: list[AttackTrace]) -> str:
    if not traces:
        return "no attacks\n"
    return "".join(f"ATTACK {k}: {t.render()}\n" for k, t in enumerate(traces, 1))
