"""A small Copland-style protocol language and its executor.

Grammar (``#`` starts a comment that runs to end of line)::

    term := 'asp' NAME NAME | 'sign' | 'nonce'
          | term '->' term          (sequence, right associative, loosest)
          | term '~' term           (parallel, binds tighter than '->')
          | '(' term ')'

Executing a term on a booted platform runs each measurement as a short-lived
process, then signs the collected evidence through the ``tpm_sign`` service.
"""

from __future__ import annotations

import itertools
import logging
import random
import re
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Optional, Union

from . import platform_sim as ps
from . import tpm_sim
from .canonical import BUNDLE_MAGIC, DecodeError, Reader, Writer, strip_magic
from .digest_core import Digest, hash_bytes

log = logging.getLogger(__name__)


class ProtocolError(Exception):
    pass


class ProtocolSyntaxError(ProtocolError):
    def __init__(self, message: str, line: int, col: int) -> None:
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col


class MisplacedSign(ProtocolError):
    pass


class MisplacedNonce(ProtocolError):
    pass


class AspUnavailable(ProtocolError):
    pass


class SigningDenied(ProtocolError):
    def __init__(self, reason: str, bundle: Optional[EvidenceBundle] = None) -> None:
        super().__init__(reason)
        self.reason = reason
        self.bundle = bundle


# ---------------------------------------------------------------------------
# terms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Asp:
    asp: str
    target: str


@dataclass(frozen=True)
class Sign:
    pass


@dataclass(frozen=True)
class Nonce:
    pass


@dataclass(frozen=True)
class Seq:
    left: Term
    right: Term


@dataclass(frozen=True)
class Par:
    left: Term
    right: Term


Term = Union[Asp, Sign, Nonce, Seq, Par]

CANONICAL_CDS_PROTOCOL = (
    "nonce -> asp lkim kerIma -> asp sepol selinux_policy -> "
    "(asp cfg rewrite_cfg ~ asp cfg filter_cfg ~ asp bin intake ~ asp bin rewrite"
    " ~ asp bin filter ~ asp bin export) -> sign"
)

_TOKEN = re.compile(r"\s+|#[^\n]*|->|~|\(|\)|[A-Za-z0-9_]+")
_KEYWORDS = {"asp", "sign", "nonce"}


@dataclass(frozen=True)
class _Tok:
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ProtocolSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        chunk = m.group()
        if not chunk.isspace() and not chunk.startswith("#"):
            toks.append(_Tok(chunk, line, pos - line_start + 1))
        for i, ch in enumerate(chunk):
            if ch == "\n":
                line += 1
                line_start = pos + i + 1
        pos = m.end()
    toks.append(_Tok("", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, text: str) -> None:
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self, expected: str | None = None) -> _Tok:
        tok = self.toks[self.i]
        if expected is not None and tok.text != expected:
            found = tok.text or "end of input"
            raise ProtocolSyntaxError(f"expected {expected!r}, found {found!r}", tok.line, tok.col)
        self.i += 1
        return tok

    def name(self) -> str:
        tok = self.take()
        if not re.fullmatch(r"[A-Za-z0-9_]+", tok.text) or tok.text in _KEYWORDS:
            raise ProtocolSyntaxError(f"expected a name, found {tok.text or 'end of input'!r}", tok.line, tok.col)
        return tok.text

    def seq(self) -> Term:
        left = self.par()
        if self.peek().text == "->":
            self.take()
            return Seq(left, self.seq())
        return left

    def par(self) -> Term:
        term = self.atom()
        while self.peek().text == "~":
            self.take()
            term = Par(term, self.atom())
        return term

    def atom(self) -> Term:
        tok = self.peek()
        if tok.text == "asp":
            self.take()
            return Asp(self.name(), self.name())
        if tok.text == "sign":
            self.take()
            return Sign()
        if tok.text == "nonce":
            self.take()
            return Nonce()
        if tok.text == "(":
            self.take()
            inner = self.seq()
            self.take(")")
            return inner
        raise ProtocolSyntaxError(f"unexpected {tok.text or 'end of input'!r}", tok.line, tok.col)


def parse(text: str) -> Term:
    p = _Parser(text)
    term = p.seq()
    tail = p.peek()
    if tail.text:
        raise ProtocolSyntaxError(f"unexpected {tail.text!r} after term", tail.line, tail.col)
    validate(term)
    return term


def render(term: Term) -> str:
    if isinstance(term, Asp):
        return f"asp {term.asp} {term.target}"
    if isinstance(term, Sign):
        return "sign"
    if isinstance(term, Nonce):
        return "nonce"
    if isinstance(term, Seq):
        left = render(term.left)
        if isinstance(term.left, Seq):
            left = f"({left})"
        return f"{left} -> {render(term.right)}"
    left, right = render(term.left), render(term.right)
    if isinstance(term.left, Seq):
        left = f"({left})"
    if isinstance(term.right, (Seq, Par)):
        right = f"({right})"
    return f"{left} ~ {right}"


def leaves(term: Term) -> Iterator[Term]:
    if isinstance(term, (Seq, Par)):
        yield from leaves(term.left)
        yield from leaves(term.right)
    else:
        yield term


def validate(term: Term) -> None:
    graph = events(term)
    signs = [e for e in graph.events if e.kind == "sign"]
    if len(signs) > 1:
        raise MisplacedSign("sign may appear at most once")
    for s in signs:
        if any((s.id, e.id) in graph.order or (e.id != s.id and (e.id, s.id) not in graph.order) for e in graph.events):
            raise MisplacedSign("sign must follow every other event")
    for n in (e for e in graph.events if e.kind == "nonce"):
        if any((e.id, n.id) in graph.order for e in graph.events):
            raise MisplacedNonce("nonce must not follow another event")


# ---------------------------------------------------------------------------
# event semantics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Event:
    id: int
    kind: str  # measure | sign | nonce
    asp: str = ""
    target: str = ""

    def label(self) -> str:
        return f"{self.asp}({self.target})" if self.kind == "measure" else self.kind


@dataclass(frozen=True)
class EventGraph:
    events: tuple[Event, ...]
    order: frozenset[tuple[int, int]]

    def predecessors(self, eid: int) -> set[int]:
        return {a for a, b in self.order if b == eid}


def events(term: Term) -> EventGraph:
    counter = itertools.count()
    evs: list[Event] = []
    order: set[tuple[int, int]] = set()

    def walk(t: Term) -> list[int]:
        if isinstance(t, Asp):
            e = Event(next(counter), "measure", t.asp, t.target)
        elif isinstance(t, Sign):
            e = Event(next(counter), "sign")
        elif isinstance(t, Nonce):
            e = Event(next(counter), "nonce")
        else:
            left, right = walk(t.left), walk(t.right)
            if isinstance(t, Seq):
                order.update((a, b) for a in left for b in right)
            return left + right
        evs.append(e)
        return [e.id]

    walk(term)
    # the nonce arrives with the request, before anything runs
    for n in (e for e in evs if e.kind == "nonce"):
        order.update((n.id, e.id) for e in evs if e.kind != "nonce" and (e.id, n.id) not in order)
    return EventGraph(tuple(evs), frozenset(order))


def linear_extensions(graph: EventGraph) -> Iterator[tuple[int, ...]]:
    ids = [e.id for e in graph.events]
    preds = {i: graph.predecessors(i) for i in ids}

    def go(done: tuple[int, ...], left: frozenset[int]) -> Iterator[tuple[int, ...]]:
        if not left:
            yield done
            return
        placed = set(done)
        for i in sorted(left):
            if preds[i] <= placed:
                yield from go(done + (i,), left - {i})

    yield from go((), frozenset(ids))


def random_schedule(graph: EventGraph, rng: random.Random) -> list[int]:
    done: list[int] = []
    left = {e.id for e in graph.events}
    preds = {e.id: graph.predecessors(e.id) for e in graph.events}
    while left:
        ready = sorted(i for i in left if preds[i] <= set(done))
        pick = rng.choice(ready)
        done.append(pick)
        left.remove(pick)
    return done


# ---------------------------------------------------------------------------
# evidence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Measurement:
    asp: str
    target: str
    digest: Digest


@dataclass(frozen=True)
class NonceLeaf:
    value: Digest


@dataclass(frozen=True)
class SeqNode:
    left: Node
    right: Node


@dataclass(frozen=True)
class ParNode:
    left: Node
    right: Node


@dataclass(frozen=True)
class SignedNode:
    key_id: str
    signature: bytes = b""


Node = Union[Measurement, NonceLeaf, SeqNode, ParNode, SignedNode]


@dataclass(frozen=True)
class EvidenceBundle:
    root: Node
    nonce: Digest
    quote: Optional[bytes] = None

    def body(self) -> bytes:
        """Bytes covered by the signature: every node except signature values."""
        w = Writer().text("evidence-body")
        _encode_node(self.root, w, with_signatures=False)
        w.digest(self.nonce)
        w.raw(self.quote or b"")
        return w.getvalue()

    def signed_node(self) -> Optional[SignedNode]:
        for leaf in node_leaves(self.root):
            if isinstance(leaf, SignedNode):
                return leaf
        return None

    def measurements(self) -> list[Measurement]:
        return [n for n in node_leaves(self.root) if isinstance(n, Measurement)]

    def to_bytes(self) -> bytes:
        w = Writer()
        _encode_node(self.root, w, with_signatures=True)
        w.digest(self.nonce)
        w.raw(self.quote or b"")
        return BUNDLE_MAGIC + w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> EvidenceBundle:
        r = Reader(strip_magic(data, BUNDLE_MAGIC))
        root = _decode_node(r, depth=0)
        nonce = r.digest()
        quote = r.raw()
        r.expect_end()
        return cls(root, nonce, quote or None)


def node_leaves(node: Node) -> Iterator[Node]:
    if isinstance(node, (SeqNode, ParNode)):
        yield from node_leaves(node.left)
        yield from node_leaves(node.right)
    else:
        yield node


def _encode_node(node: Node, w: Writer, with_signatures: bool) -> None:
    if isinstance(node, Measurement):
        w.text("measure").text(node.asp).text(node.target).digest(node.digest)
    elif isinstance(node, NonceLeaf):
        w.text("nonce").digest(node.value)
    elif isinstance(node, SignedNode):
        w.text("sign").text(node.key_id)
        if with_signatures:
            w.raw(node.signature)
    else:
        w.text("seq" if isinstance(node, SeqNode) else "par")
        _encode_node(node.left, w, with_signatures)
        _encode_node(node.right, w, with_signatures)


def _decode_node(r: Reader, depth: int) -> Node:
    if depth > 256:
        raise DecodeError("bundle nested too deeply")
    tag = r.text()
    if tag == "measure":
        return Measurement(r.text(), r.text(), r.digest())
    if tag == "nonce":
        return NonceLeaf(r.digest())
    if tag == "sign":
        return SignedNode(r.text(), r.raw())
    if tag in ("seq", "par"):
        left = _decode_node(r, depth + 1)
        right = _decode_node(r, depth + 1)
        return SeqNode(left, right) if tag == "seq" else ParNode(left, right)
    raise DecodeError(f"unknown bundle node {tag!r}")


def shape_of(node: Node) -> Term:
    """The protocol term a bundle was produced from."""
    if isinstance(node, Measurement):
        return Asp(node.asp, node.target)
    if isinstance(node, NonceLeaf):
        return Nonce()
    if isinstance(node, SignedNode):
        return Sign()
    ctor = Seq if isinstance(node, SeqNode) else Par
    return ctor(shape_of(node.left), shape_of(node.right))


def build_tree(term: Term, results: Mapping[int, Node]) -> Node:
    """Assemble evidence in term shape from per-event results keyed by event id."""
    counter = itertools.count()

    def walk(t: Term) -> Node:
        if isinstance(t, (Seq, Par)):
            left, right = walk(t.left), walk(t.right)
            return SeqNode(left, right) if isinstance(t, Seq) else ParNode(left, right)
        return results[next(counter)]

    return walk(term)


def with_signature(node: Node, signature: bytes) -> Node:
    if isinstance(node, SignedNode):
        return SignedNode(node.key_id, signature)
    if isinstance(node, (SeqNode, ParNode)):
        return type(node)(with_signature(node.left, signature), with_signature(node.right, signature))
    return node


def seal_bundle(bundle: EvidenceBundle, sign: Callable[[bytes], bytes]) -> EvidenceBundle:
    """Fill the signature slot using ``sign`` over the bundle body."""
    return EvidenceBundle(with_signature(bundle.root, sign(bundle.body())), bundle.nonce, bundle.quote)


# ---------------------------------------------------------------------------
# measurement services
# ---------------------------------------------------------------------------

TARGET_PATHS = {
    "intake": "/cds/bin/intake",
    "rewrite": "/cds/bin/rewrite",
    "filter": "/cds/bin/filter",
    "export": "/cds/bin/export",
    "rewrite_cfg": "/cds/etc/rewrite.cfg",
    "filter_cfg": "/cds/etc/filter.cfg",
}

Measure = Callable[[ps.PlatformState, int, str], Digest]


@dataclass(frozen=True)
class AspService:
    path: str
    measure: Measure


def kernel_state_digest(state: ps.PlatformState) -> Digest:
    w = Writer().text("kernel-state").u8(int(state.kernel.corrupted))
    w.u8(int(state.kernel.ima_enabled)).u8(int(state.kernel.selinux_enforcing))
    w.digest(hash_bytes(state.boot_inputs.get("kernel", b"")))
    w.raw(state.policy.encode())
    return hash_bytes(w.getvalue())


def _lkim(state: ps.PlatformState, pid: int, target: str) -> Digest:
    if target != "kerIma":
        raise AspUnavailable(f"lkim cannot measure {target!r}")
    return kernel_state_digest(state)


def _sepol(state: ps.PlatformState, pid: int, target: str) -> Digest:
    if target != "selinux_policy":
        raise AspUnavailable(f"sepol cannot measure {target!r}")
    return hash_bytes(Writer().text("loaded-policy").raw(state.policy.encode()).getvalue())


def _file_hash(state: ps.PlatformState, pid: int, target: str) -> Digest:
    path = TARGET_PATHS.get(target)
    if path is None or path not in state.fs:
        raise AspUnavailable(f"no file for target {target!r}")
    try:
        return hash_bytes(ps.read_as(state, pid, path))
    except ps.ActionDenied as exc:
        raise AspUnavailable(str(exc)) from exc


DEFAULT_ASPS: dict[str, AspService] = {
    "lkim": AspService("/asp/lkim", _lkim),
    "sepol": AspService("/asp/sepol", _sepol),
    "cfg": AspService("/asp/cfg", _file_hash),
    "bin": AspService("/asp/bin", _file_hash),
}


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


@dataclass
class SignerConfig:
    """How ``tpm_sign`` reaches the attestation key."""

    key_id: str = "ask"
    outer_blob: Optional[tpm_sim.WrappedBlob] = None
    use_handle: bool = False


@dataclass
class ExecutionTrace:
    order: list[int] = field(default_factory=list)


def _launch_am(state: ps.PlatformState) -> int:
    try:
        launcher = state.pid_of("am_launcher_t")
    except ps.NoSuchProcess:
        launcher = ps.exec_process(state, state.pid_of("admin_t"), "/usr/libexec/am_launcher").pid
    return ps.exec_process(state, launcher, "/usr/libexec/am").pid


def _run_tpm_sign(
    state: ps.PlatformState, tpm: tpm_sim.Tpm, am_pid: int, payload: bytes, signer: SignerConfig
) -> tpm_sim.Signature:
    try:
        proc = ps.exec_process(state, am_pid, ps.TPM_SIGN_PATH)
    except ps.ExecDenied as exc:
        raise AspUnavailable(f"tpm_sign: {exc}") from exc
    try:
        if signer.use_handle:
            return ps.sign_as(state, tpm, proc.pid, payload, handle=signer.key_id)
        if ps.ASK_BLOB_PATH in state.fs and ps.can_read(state, proc.pid, ps.ASK_BLOB_PATH):
            blob = tpm_sim.WrappedBlob.from_bytes(ps.read_as(state, proc.pid, ps.ASK_BLOB_PATH))
        elif signer.outer_blob is not None:
            # no released copy: only the gated outer layer remains
            blob = tpm.unwrap(signer.outer_blob, state.bank, proc.locality_grant or 0)
        else:
            raise SigningDenied("no_key")
        return ps.sign_as(state, tpm, proc.pid, payload, blob=blob)
    finally:
        state.exit(proc.pid)


def execute(
    term: Term,
    platform: ps.PlatformState,
    tpm: tpm_sim.Tpm,
    nonce: Digest,
    asp_table: Mapping[str, AspService] | None = None,
    signer: SignerConfig | None = None,
    seed: int = 0,
    trace: ExecutionTrace | None = None,
    quote_pcrs: tuple[int, ...] | None = None,
) -> EvidenceBundle:
    if platform.phase != ps.POST_RELEASE:
        raise ps.PhaseError(f"attestation runs at {ps.POST_RELEASE}, platform is {platform.phase}")
    asp_table = DEFAULT_ASPS if asp_table is None else asp_table
    signer = signer or SignerConfig()
    graph = events(term)
    schedule = random_schedule(graph, random.Random(seed))
    if trace is not None:
        trace.order = list(schedule)
    try:
        am_pid = _launch_am(platform)
    except ps.ExecDenied as exc:
        raise AspUnavailable(f"attestation manager: {exc}") from exc
    results: dict[int, Node] = {}
    by_id = {e.id: e for e in graph.events}
    try:
        for eid in schedule:
            ev = by_id[eid]
            if ev.kind == "nonce":
                results[eid] = NonceLeaf(nonce)
            elif ev.kind == "sign":
                results[eid] = SignedNode(signer.key_id)
            else:
                results[eid] = Measurement(ev.asp, ev.target, _run_asp(platform, am_pid, ev, asp_table))
        unsigned = EvidenceBundle(build_tree(term, results), nonce)
        if quote_pcrs:
            unsigned = _attach_quote(unsigned, platform, tpm, am_pid, signer, quote_pcrs)
        if not any(e.kind == "sign" for e in graph.events):
            return unsigned
        try:
            sig = _run_tpm_sign(platform, tpm, am_pid, unsigned.body(), signer)
        except tpm_sim.PolicyUnsatisfied as exc:
            raise SigningDenied(exc.reason, unsigned) from exc
        except SigningDenied as exc:
            raise SigningDenied(exc.reason, unsigned) from exc
        return seal_bundle(unsigned, lambda _body: sig.value)
    finally:
        platform.exit(am_pid)


def _run_asp(state: ps.PlatformState, am_pid: int, ev: Event, asp_table: Mapping[str, AspService]) -> Digest:
    service = asp_table.get(ev.asp)
    if service is None:
        raise AspUnavailable(f"no service named {ev.asp!r}")
    try:
        proc = ps.exec_process(state, am_pid, service.path)
    except ps.ExecDenied as exc:
        raise AspUnavailable(f"{ev.asp}: {exc}") from exc
    try:
        return service.measure(state, proc.pid, ev.target)
    finally:
        state.exit(proc.pid)


def _attach_quote(
    bundle: EvidenceBundle,
    state: ps.PlatformState,
    tpm: tpm_sim.Tpm,
    am_pid: int,
    signer: SignerConfig,
    pcrs: tuple[int, ...],
) -> EvidenceBundle:
    proc = ps.exec_process(state, am_pid, ps.TPM_SIGN_PATH)
    try:
        loc = proc.locality_grant or 0
        if signer.use_handle:
            q = tpm.quote(state.bank, pcrs, bundle.nonce, loc, handle=signer.key_id)
        else:
            blob = tpm_sim.WrappedBlob.from_bytes(ps.read_as(state, proc.pid, ps.ASK_BLOB_PATH))
            q = tpm.quote(state.bank, pcrs, bundle.nonce, loc, blob=blob)
    except (tpm_sim.PolicyUnsatisfied, ps.ActionDenied, KeyError) as exc:
        raise SigningDenied(getattr(exc, "reason", "no_key"), bundle) from exc
    finally:
        state.exit(proc.pid)
    return EvidenceBundle(bundle.root, bundle.nonce, q.to_bytes())
