"""Check an evidence bundle against golden values and render the verdict."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import copland_proto as cp
from . import tpm_sim
from .digest_core import Digest

PASSED = "passed"
FAILED = "failed"


@dataclass
class GoldenStore:
    values: dict[tuple[str, str], Digest] = field(default_factory=dict)
    keys: dict[str, bytes] = field(default_factory=dict)
    expected_nonce: Optional[Digest] = None
    quote_digest: Optional[Digest] = None  # golden bank digest, only for quote leaves

    def with_nonce(self, nonce: Digest) -> GoldenStore:
        return GoldenStore(dict(self.values), dict(self.keys), nonce, self.quote_digest)

    def dumps(self) -> str:
        lines = [f"{asp} {target} {d.hex()}" for (asp, target), d in sorted(self.values.items())]
        lines += [f"key {kid} {vk.hex()}" for kid, vk in sorted(self.keys.items())]
        if self.quote_digest is not None:
            lines.append(f"quote pcrs {self.quote_digest.hex()}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> GoldenStore:
        store = cls()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"golden store line {n}: expected three fields")
            a, b, c = parts
            if a == "key":
                store.keys[b] = bytes.fromhex(c)
            elif a == "quote":
                store.quote_digest = Digest.parse(c)
            else:
                store.values[(a, b)] = Digest.parse(c)
        return store

    @classmethod
    def load(cls, path: Path) -> GoldenStore:
        return cls.loads(Path(path).read_text())


@dataclass(frozen=True)
class Verdict:
    overall: str
    shape_ok: bool
    signature_ok: bool
    nonce_ok: bool
    per_target: tuple[tuple[tuple[str, str], str], ...]  # ((asp, target), "passed" | "failed: why")
    quote_ok: Optional[bool] = None

    @property
    def passed(self) -> bool:
        return self.overall == PASSED

    def target(self, asp: str, target: str) -> str:
        for key, result in self.per_target:
            if key == (asp, target):
                return result
        raise KeyError((asp, target))

    def failed_targets(self) -> list[tuple[str, str]]:
        return [key for key, result in self.per_target if result != PASSED]


def appraise(bundle: cp.EvidenceBundle, store: GoldenStore, expected_term: cp.Term) -> Verdict:
    shape_ok = cp.shape_of(bundle.root) == expected_term

    signed = bundle.signed_node()
    signature_ok = False
    if signed is not None and signed.key_id in store.keys:
        signature_ok = tpm_sim.verify_signature(store.keys[signed.key_id], bundle.body(), signed.signature)

    embedded = [n.value for n in cp.node_leaves(bundle.root) if isinstance(n, cp.NonceLeaf)]
    nonce_ok = (
        store.expected_nonce is not None
        and bundle.nonce == store.expected_nonce
        and all(v == store.expected_nonce for v in embedded)
    )

    quote_ok = None
    if bundle.quote is not None:
        quote_ok = _check_quote(bundle, store)

    # every measurement leaf of the expected term, in term order
    expected = [(t.asp, t.target) for t in cp.leaves(expected_term) if isinstance(t, cp.Asp)]
    got: dict[tuple[str, str], list[Digest]] = {}
    for m in bundle.measurements():
        got.setdefault((m.asp, m.target), []).append(m.digest)
    per_target = []
    for key in expected:
        golden = store.values.get(key)
        digests = got.get(key, [])
        if golden is None:
            result = "failed: no golden value"
        elif not digests:
            result = "failed: missing"
        elif len(digests) > 1 and len(set(digests)) > 1:
            result = "failed: conflicting measurements"
        elif digests[0] != golden:
            result = "failed: digest mismatch"
        else:
            result = PASSED
        per_target.append((key, result))

    ok = shape_ok and signature_ok and nonce_ok and quote_ok is not False
    ok = ok and all(r == PASSED for _, r in per_target)
    return Verdict(
        PASSED if ok else FAILED, shape_ok, signature_ok, nonce_ok, tuple(per_target), quote_ok
    )


def _check_quote(bundle: cp.EvidenceBundle, store: GoldenStore) -> bool:
    try:
        quote = tpm_sim.Quote.from_bytes(bundle.quote or b"")
    except ValueError:
        return False
    vk = store.keys.get(quote.key_id)
    return (
        vk is not None
        and tpm_sim.verify_quote(quote, vk)
        and quote.nonce == store.expected_nonce
        and (store.quote_digest is None or quote.pcr_digest == store.quote_digest)
    )


def _mark(ok: bool) -> str:
    return "PASSED" if ok else "FAILED"


def render_report(verdict: Verdict) -> str:
    lines = [
        f"shape      {_mark(verdict.shape_ok)}",
        f"signature  {_mark(verdict.signature_ok)}",
        f"nonce      {_mark(verdict.nonce_ok)}",
    ]
    if verdict.quote_ok is not None:
        lines.append(f"quote      {_mark(verdict.quote_ok)}")
    for (asp, target), result in verdict.per_target:
        line = f"target {asp} {target}  {_mark(result == PASSED)}"
        if result != PASSED:
            line += f" ({result.split(': ', 1)[-1]})"
        lines.append(line)
    lines.append(f"overall    {_mark(verdict.passed)}")
    return "\n".join(lines) + "\n"


def exit_code(verdict: Verdict) -> int:
    return 0 if verdict.passed else 1
