"""Measurement graphs, adversary constraints, attack traces and their text formats."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Optional

WINDOW_UNRESTRICTED = "unrestricted"
WINDOW_BOOT_BOUNDARY = "boot-boundary"

QUERY_AT_MEASUREMENT = "at-measurement"
QUERY_AT_END = "at-end"


class AnalysisError(Exception):
    pass


class UnknownComponent(AnalysisError):
    pass


class GraphFormatError(AnalysisError):
    def __init__(self, message: str, line: int = 0) -> None:
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass(frozen=True, order=True)
class MsEvent:
    measurer: str
    target: str

    @property
    def name(self) -> str:
        return f"ms({self.measurer},{self.target})"

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class MeasurementGraph:
    components: frozenset[str]
    events: tuple[MsEvent, ...]
    order: frozenset[tuple[MsEvent, MsEvent]]
    depends: frozenset[tuple[str, str]]
    boot_events: frozenset[MsEvent] = frozenset()

    def __post_init__(self) -> None:
        evs = set(self.events)
        if len(evs) != len(self.events):
            raise GraphFormatError("duplicate measurement event")
        for e in self.events:
            for c in (e.measurer, e.target):
                if c not in self.components:
                    raise UnknownComponent(c)
        for a, b in self.depends:
            for c in (a, b):
                if c not in self.components:
                    raise UnknownComponent(c)
        if not self.boot_events <= evs:
            raise GraphFormatError("boundary names an unknown event")
        pairs = {(a, b) for a, b in self.order}
        for a, b in pairs:
            if a not in evs or b not in evs:
                raise GraphFormatError(f"order mentions unknown event {a} or {b}")
        # boot events precede runtime events
        pairs |= {(a, b) for a in self.boot_events for b in evs - self.boot_events}
        closed = _transitive_closure(pairs)
        if any(a == b for a, b in closed):
            raise GraphFormatError("event order has a cycle")
        if any(b in self.boot_events and a not in self.boot_events for a, b in closed):
            raise GraphFormatError("a runtime event precedes a boot event")
        object.__setattr__(self, "order", frozenset(closed))

    def deps_closure(self, component: str) -> frozenset[str]:
        """Everything ``component`` transitively depends on (not itself unless cyclic)."""
        if component not in self.components:
            raise UnknownComponent(component)
        seen: set[str] = set()
        stack = [component]
        while stack:
            c = stack.pop()
            for a, b in self.depends:
                if a == c and b not in seen:
                    seen.add(b)
                    stack.append(b)
        return frozenset(seen)

    def without_depends(self, pairs: Iterable[tuple[str, str]]) -> MeasurementGraph:
        return replace(self, depends=self.depends - frozenset(pairs))

    def restrict(self, keep: Iterable[MsEvent]) -> MeasurementGraph:
        """Sub-graph on the given events; components shrink to those still mentioned."""
        kept = tuple(e for e in self.events if e in set(keep))
        comps = {c for e in kept for c in (e.measurer, e.target)}
        deps = {(a, b) for a, b in self.depends if a in comps and b in comps}
        order = {(a, b) for a, b in self.order if a in kept and b in kept}
        return MeasurementGraph(
            frozenset(comps), kept, frozenset(order), frozenset(deps), self.boot_events & set(kept)
        )

    def linear_extensions(self) -> Iterator[tuple[MsEvent, ...]]:
        preds = {e: {a for a, b in self.order if b == e} for e in self.events}

        def go(prefix: tuple[MsEvent, ...], placed: frozenset[MsEvent]) -> Iterator[tuple[MsEvent, ...]]:
            if len(prefix) == len(self.events):
                yield prefix
                return
            for e in self.events:
                if e not in placed and preds[e] <= placed:
                    yield from go(prefix + (e,), placed | {e})

        yield from go((), frozenset())


def _transitive_closure(pairs: set[tuple]) -> set[tuple]:
    closed = set(pairs)
    succ: dict = {}
    for a, b in closed:
        succ.setdefault(a, set()).add(b)
    changed = True
    while changed:
        changed = False
        for a in list(succ):
            reach = set(succ[a])
            for b in list(reach):
                reach |= succ.get(b, set())
            if reach != succ[a]:
                succ[a] = reach
                changed = True
    return {(a, b) for a, bs in succ.items() for b in bs}


@dataclass(frozen=True)
class CardinalityRule:
    members: frozenset[str]
    limit: int


@dataclass(frozen=True)
class AdversarySpec:
    forbidden: frozenset[str] = frozenset()
    precedence: frozenset[tuple[str, str]] = frozenset()  # (corruptee, required earlier corruptee)
    window: str = WINDOW_UNRESTRICTED
    cardinality: frozenset[CardinalityRule] = frozenset()
    budget: int = 2
    dropped_depends: frozenset[tuple[str, str]] = frozenset()

    def __post_init__(self) -> None:
        if self.window not in (WINDOW_UNRESTRICTED, WINDOW_BOOT_BOUNDARY):
            raise ValueError(f"unknown window rule {self.window!r}")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")

    def rules(self) -> list[tuple[str, AdversarySpec]]:
        """Each single constraint paired with the spec that lacks only it."""
        out = []
        for c in sorted(self.forbidden):
            out.append((f"forbid {c}", replace(self, forbidden=self.forbidden - {c})))
        for a, b in sorted(self.precedence):
            out.append((f"precede {a} {b}", replace(self, precedence=self.precedence - {(a, b)})))
        if self.window != WINDOW_UNRESTRICTED:
            out.append((f"window {self.window}", replace(self, window=WINDOW_UNRESTRICTED)))
        for rule in sorted(self.cardinality, key=lambda r: (sorted(r.members), r.limit)):
            text = f"at_most {rule.limit} {' '.join(sorted(rule.members))}"
            out.append((text, replace(self, cardinality=self.cardinality - {rule})))
        for a, b in sorted(self.dropped_depends):
            out.append((f"drop_depends {a} {b}", replace(self, dropped_depends=self.dropped_depends - {(a, b)})))
        return out

    def lines(self) -> list[str]:
        return [r for r, _ in self.rules()] + [f"budget {self.budget}"]


def window_slots(graph: MeasurementGraph) -> frozenset[int]:
    """Slots (counted in completed measurements) before boot and at the boundary."""
    return frozenset({0, len(graph.boot_events)})


# ---------------------------------------------------------------------------
# detection rule
# ---------------------------------------------------------------------------


def measurement_passes(
    event: MsEvent, corrupted: Mapping[str, bool] | frozenset[str] | set[str], graph: MeasurementGraph
) -> bool:
    if isinstance(corrupted, Mapping):
        for c in corrupted:
            if c not in graph.components:
                raise UnknownComponent(c)
        bad = {c for c, v in corrupted.items() if v}
    else:
        bad = set(corrupted)
        for c in bad:
            if c not in graph.components:
                raise UnknownComponent(c)
    for c in (event.measurer, event.target):
        if c not in graph.components:
            raise UnknownComponent(c)
    if event.target not in bad:
        return True
    return event.measurer in bad or bool(graph.deps_closure(event.measurer) & bad)


def pass_reason(event: MsEvent, bad: set[str], graph: MeasurementGraph) -> str:
    if event.target not in bad:
        return "target clean"
    if event.measurer in bad:
        return "measurer corrupted"
    hit = sorted(graph.deps_closure(event.measurer) & bad)
    return f"dependency {hit[0]} corrupted" if hit else "detected"


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

MultisetKey = tuple[tuple[str, str, int], ...]


@dataclass(frozen=True)
class AttackTrace:
    steps: tuple[str, ...]
    target: str
    rule_status: tuple[str, ...] = field(default=(), compare=False)

    @property
    def adversary_events(self) -> MultisetKey:
        return multiset_key(s for s in self.steps if not s.startswith("ms("))

    def render(self) -> str:
        return " ".join(self.steps)


def multiset_key(adversary_steps: Iterable[str]) -> MultisetKey:
    counts = Counter(adversary_steps)
    out = []
    for step, n in sorted(counts.items()):
        kind, comp = step[:-1].split("(", 1)
        out.append((kind, comp, n))
    return tuple(out)


def is_submultiset(a: MultisetKey, b: MultisetKey) -> bool:
    cb = {(k, c): n for k, c, n in b}
    return all(cb.get((k, c), 0) >= n for k, c, n in a)


def canonical_sort(traces: Iterable[AttackTrace]) -> list[AttackTrace]:
    return sorted(traces, key=lambda t: (sum(n for *_, n in t.adversary_events), t.adversary_events, t.steps))


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

_EVENT_RE = re.compile(r"^ms\(\s*([A-Za-z0-9_]+)\s*,\s*([A-Za-z0-9_]+)\s*\)$")
SECTIONS = ("components", "measures", "order", "depends", "boundary", "spec")


@dataclass
class AnalysisInput:
    graph: Optional[MeasurementGraph]
    spec: Optional[AdversarySpec]
    query: Optional[str] = None
    query_mode: str = QUERY_AT_MEASUREMENT


def _parse_event(text: str, n: int) -> MsEvent:
    text = text.strip()
    m = _EVENT_RE.match(text)
    if m:
        return MsEvent(m.group(1), m.group(2))
    parts = text.split()
    if len(parts) == 2:
        return MsEvent(*parts)
    raise GraphFormatError(f"cannot read event {text!r}", n)


def parse_analysis_text(text: str) -> AnalysisInput:
    sections: dict[str, list[tuple[int, str]]] = {}
    current: Optional[str] = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head = line.rstrip(":").strip()
        if line.endswith(":") and head in SECTIONS:
            current = head
            sections.setdefault(current, [])
            continue
        if current is None:
            raise GraphFormatError("content before the first section header", n)
        sections[current].append((n, line))

    graph = None
    if "measures" in sections:
        comps: set[str] = set()
        for _, line in sections.get("components", []):
            comps.update(line.replace(",", " ").split())
        events = [_parse_event(line, n) for n, line in sections["measures"]]
        order = set()
        for n, line in sections.get("order", []):
            parts = [p for p in line.split("<")]
            if len(parts) < 2:
                raise GraphFormatError("order lines look like 'ms(a,b) < ms(c,d)'", n)
            chain = [_parse_event(p, n) for p in parts]
            order.update(zip(chain, chain[1:]))
        deps = set()
        for n, line in sections.get("depends", []):
            parts = line.replace("->", " ").split()
            if len(parts) != 2:
                raise GraphFormatError("depends lines look like 'component dependency'", n)
            deps.add((parts[0], parts[1]))
        boot = {_parse_event(line, n) for n, line in sections.get("boundary", [])}
        comps |= {c for e in events for c in (e.measurer, e.target)}
        graph = MeasurementGraph(frozenset(comps), tuple(events), frozenset(order), frozenset(deps), frozenset(boot))

    spec = None
    query, mode = None, QUERY_AT_MEASUREMENT
    if "spec" in sections:
        kw: dict = dict(forbidden=set(), precedence=set(), cardinality=set(), dropped_depends=set())
        for n, line in sections["spec"]:
            words = line.split()
            match words:
                case ["forbid", *names] if names:
                    kw["forbidden"].update(names)
                case ["precede", a, b]:
                    kw["precedence"].add((a, b))
                case ["window", w] if w in (WINDOW_UNRESTRICTED, WINDOW_BOOT_BOUNDARY):
                    kw["window"] = w
                case ["at_most", k, *names] if k.isdigit() and names:
                    kw["cardinality"].add(CardinalityRule(frozenset(names), int(k)))
                case ["drop_depends", a, b]:
                    kw["dropped_depends"].add((a, b))
                case ["budget", k] if k.isdigit() and int(k) >= 1:
                    kw["budget"] = int(k)
                case ["query", target]:
                    query = None if target == "any" else target
                case ["query_mode", m] if m in (QUERY_AT_MEASUREMENT, QUERY_AT_END):
                    mode = m
                case _:
                    raise GraphFormatError(f"unknown spec rule {line!r}", n)
        spec = AdversarySpec(
            frozenset(kw["forbidden"]),
            frozenset(kw["precedence"]),
            kw.get("window", WINDOW_UNRESTRICTED),
            frozenset(kw["cardinality"]),
            kw.get("budget", 2),
            frozenset(kw["dropped_depends"]),
        )
    return AnalysisInput(graph, spec, query, mode)


def render_graph(graph: MeasurementGraph) -> str:
    lines = ["components:", "  " + " ".join(sorted(graph.components)), "measures:"]
    lines += [f"  {e.measurer} {e.target}" for e in graph.events]
    # only the covering pairs; the closure is recomputed on load
    order = graph.order
    cover = sorted(
        (a, b)
        for a, b in order
        if not any((a, c) in order and (c, b) in order for c in graph.events)
    )
    lines.append("order:")
    lines += [f"  {a} < {b}" for a, b in cover]
    lines.append("depends:")
    lines += [f"  {a} {b}" for a, b in sorted(graph.depends)]
    lines.append("boundary:")
    lines += [f"  {e}" for e in graph.events if e in graph.boot_events]
    return "\n".join(lines) + "\n"


def render_spec(spec: AdversarySpec, query: Optional[str] = None) -> str:
    lines = ["spec:"] + [f"  {line}" for line in spec.lines()]
    if query is not None:
        lines.append(f"  query {query}")
    return "\n".join(lines) + "\n"
