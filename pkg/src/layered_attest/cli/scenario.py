"""Line-oriented scenario files: ``step <verb> <args>`` and ``expect <predicate>``.

A scenario drives one deployment through boot, adversary actions and
attestation, and asserts outcomes along the way. The report is deterministic
for a given file, so two runs produce identical bytes.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .. import appraisal
from .. import attack_analysis as aa
from .. import copland_proto as cp
from .. import platform_sim as ps
from .. import tpm_sim
from ..deployment import Deployment, provision

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


class ScenarioParseError(Exception):
    def __init__(self, message: str, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class StepFailed(Exception):
    """A step raised where the scenario did not expect it."""

    def __init__(self, index: int, message: str) -> None:
        super().__init__(f"step {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class Line:
    number: int
    kind: str  # step | expect
    words: tuple[str, ...]

    @property
    def text(self) -> str:
        return " ".join(shlex.quote(w) if (" " in w or not w) else w for w in self.words)


def parse_scenario(text: str) -> list[Line]:
    lines = []
    for n, raw in enumerate(text.splitlines(), 1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            words = shlex.split(stripped, comments=True)
        except ValueError as exc:
            raise ScenarioParseError(str(exc), n) from None
        if not words:
            continue
        if words[0] not in ("step", "expect") or len(words) < 2:
            raise ScenarioParseError(f"expected 'step <verb>' or 'expect <predicate>', got {stripped!r}", n)
        verb = words[1]
        table = STEP_VERBS if words[0] == "step" else EXPECT_PREDICATES
        if verb not in table:
            raise ScenarioParseError(f"unknown {words[0]} {verb!r}", n)
        lines.append(Line(n, words[0], tuple(words[1:])))
    return lines


@dataclass
class Outcome:
    """What the latest step left behind for ``expect`` lines to inspect."""

    kind: str = "none"
    detail: str = ""
    verdict: Optional[appraisal.Verdict] = None
    changed_pcrs: Optional[set[int]] = None
    release: Optional[str] = None
    denied_path: str = ""
    attack_count: Optional[int] = None
    adversary_signed: Optional[bool] = None
    cds_alive: Optional[int] = None


@dataclass
class ScenarioResult:
    exit_code: int
    report: str
    failures: list[str] = field(default_factory=list)


def flip_byte(data: bytes, offset: int) -> bytes:
    if not data:
        return b"\x01"
    k = offset % len(data)
    return data[:k] + bytes([data[k] ^ 0x01]) + data[k + 1 :]


class ScenarioRunner:
    def __init__(self, base_dir: Path | None = None, seed: int = 0) -> None:
        self.base_dir = base_dir or ps.fixture_dir()
        self.seed = seed
        self.dep: Optional[Deployment] = None
        self.out = Outcome()
        self.bundles: list[cp.EvidenceBundle] = []

    # -- helpers ----------------------------------------------------------------

    def _path(self, name: str) -> Path:
        for root in (self.base_dir, ps.fixture_dir()):
            p = Path(root) / name
            if p.exists():
                return p
        raise FileNotFoundError(name)

    @property
    def deployment(self) -> Deployment:
        if self.dep is None:
            self.dep = provision(self.seed)
        return self.dep

    def _appraise(self, bundle: cp.EvidenceBundle, nonce) -> appraisal.Verdict:
        dep = self.deployment
        return appraisal.appraise(bundle, dep.store.with_nonce(nonce), dep.protocol)

    def _verdict_outcome(self, verdict: appraisal.Verdict) -> Outcome:
        if verdict.passed:
            return Outcome("bundle", "passed", verdict)
        bad = [f"{a} {t}" for a, t in verdict.failed_targets()]
        for name, ok in (("shape", verdict.shape_ok), ("signature", verdict.signature_ok), ("nonce", verdict.nonce_ok)):
            if not ok:
                bad.append(name)
        return Outcome("bundle", "failed: " + ", ".join(bad), verdict)

    # -- steps ------------------------------------------------------------------

    def step_provision(self, args: list[str]) -> Outcome:
        mode = "stopgap"
        quote = None
        seed = self.seed
        it = iter(args)
        for word in it:
            if word in ("stopgap", "locality"):
                mode = word
            elif word == "quote":
                quote = tpm_sim.DEFAULT_QUOTE_PCRS
            elif word == "seed":
                seed = int(next(it))
            else:
                raise ValueError(f"provision: unknown option {word!r}")
        self.dep = provision(seed, mode, quote_pcrs=quote)
        self.bundles.clear()
        return Outcome("provisioned", mode)

    def step_boot(self, args: list[str]) -> Outcome:
        dep = self.deployment
        inputs = ps.golden_boot_inputs()
        i = 0
        while i < len(args):
            op = args[i]
            if op == "flip":
                name, offset = args[i + 1], int(args[i + 2])
                inputs[name] = flip_byte(inputs[name], offset)
                i += 3
            elif op == "replace":
                name, path = args[i + 1], args[i + 2]
                inputs[name] = self._path(path).read_bytes()
                i += 3
            else:
                raise ValueError(f"boot: unknown option {op!r}")
        if any(name not in ps.BOOT_INPUTS for name in inputs):
            raise ValueError("boot: unknown boot input")
        release = dep.boot(inputs)
        changed = dep.platform.bank.differing(dep.golden_post)
        return Outcome("boot", release, release=release, changed_pcrs=changed)

    def step_attack(self, args: list[str]) -> Outcome:
        if not args:
            raise ValueError("attack needs an action")
        kind, rest = args[0], args[1:]
        state = self.deployment.platform
        if kind == "corrupt_file":
            path = rest[0]
            obj = state.fs.get(path)
            current = obj.contents if obj else b""
            if rest[1:2] == ["flip"]:
                data = flip_byte(current, int(rest[2]))
            elif rest[1:2] == ["text"]:
                data = rest[2].encode()
            elif rest[1:2] == ["file"]:
                data = self._path(rest[2]).read_bytes()
            else:
                data = current + b"\n# tampered\n"
            action = ps.Action(kind, path, data)
        elif kind in ("read_file",):
            action = ps.Action(kind, rest[0])
        elif kind == "replace_policy":
            action = ps.Action(kind, data=self._path(rest[0]).read_bytes())
        elif kind == "reboot":
            inputs = ps.golden_boot_inputs()
            if rest[:1] == ["flip"]:
                inputs[rest[1]] = flip_byte(inputs[rest[1]], int(rest[2]))
            action = ps.Action(kind, inputs=inputs)
        else:
            action = ps.Action(kind)
        try:
            ps.adversary_act(state, action)
        except ps.ActionDenied as exc:
            return Outcome("action_denied", str(exc))
        if kind == "read_file":
            return Outcome("loot", rest[0])
        return Outcome("acted", kind)

    def step_attest(self, args: list[str]) -> Outcome:
        dep = self.deployment
        seed = int(args[args.index("seed") + 1]) if "seed" in args else None
        nonce = dep.fresh_nonce()
        try:
            bundle = dep.attest(nonce, seed)
        except cp.SigningDenied as exc:
            detail = exc.reason
            # whatever the signer could not sign must not appraise
            unsigned_ok = exc.bundle is not None and self._appraise(exc.bundle, nonce).passed
            return Outcome("signing_denied", detail + (" (unsigned bundle accepted!)" if unsigned_ok else ""))
        except cp.AspUnavailable as exc:
            cause = exc.__cause__
            path = cause.path if isinstance(cause, ps.DeniedByIma) else ""
            return Outcome("unavailable", str(exc), denied_path=path)
        self.bundles.append(bundle)
        return self._verdict_outcome(self._appraise(bundle, nonce))

    def step_replay(self, args: list[str]) -> Outcome:
        """Present an earlier bundle again against a new challenge."""
        if not self.bundles:
            raise ValueError("replay needs an earlier attest step")
        dep = self.deployment
        return self._verdict_outcome(self._appraise(self.bundles[0], dep.fresh_nonce()))

    def _forged(self, nonce, key_id: str) -> cp.EvidenceBundle:
        """An evidence bundle with golden measurements, as an impersonator would build it."""
        dep = self.deployment
        results: dict[int, cp.Node] = {}
        for ev in cp.events(dep.protocol).events:
            if ev.kind == "nonce":
                results[ev.id] = cp.NonceLeaf(nonce)
            elif ev.kind == "sign":
                results[ev.id] = cp.SignedNode(key_id)
            else:
                results[ev.id] = cp.Measurement(ev.asp, ev.target, dep.store.values[(ev.asp, ev.target)])
        return cp.EvidenceBundle(cp.build_tree(dep.protocol, results), nonce)

    def step_forge_foreign(self, args: list[str]) -> Outcome:
        dep = self.deployment
        nonce = dep.fresh_nonce()
        foreign = tpm_sim.Tpm(seed=dep.seed + 0x5EED)
        blob, _ = foreign.create_key(dep.signer.key_id, tpm_sim.UsagePolicy.build())
        unsigned = self._forged(nonce, dep.signer.key_id)
        sig = foreign.signing_session(tpm_sim.Command("sign", unsigned.body(), 0), dep.platform.bank, blob=blob)
        return self._verdict_outcome(self._appraise(cp.seal_bundle(unsigned, lambda _b: sig.value), nonce))

    def step_adversary_sign(self, args: list[str]) -> Outcome:
        """The adversary tries every signing route it has from its own shell."""
        dep = self.deployment
        state = dep.platform
        nonce = dep.fresh_nonce()
        unsigned = self._forged(nonce, dep.signer.key_id)
        adv = state.pid_of("adversary_t")
        attempts: list[str] = []
        sig = None
        stolen = state.loot.get(ps.ASK_BLOB_PATH)
        if stolen is not None:
            try:
                blob = tpm_sim.WrappedBlob.from_bytes(stolen)
                sig = ps.sign_as(state, dep.tpm, adv, unsigned.body(), blob=blob)
                attempts.append("stolen blob: signed")
            except (tpm_sim.TpmError, ValueError) as exc:
                attempts.append(f"stolen blob: {type(exc).__name__}")
        if sig is None and dep.signer.use_handle:
            try:
                sig = ps.sign_as(
                    state, dep.tpm, adv, unsigned.body(), handle=dep.signer.key_id,
                    claim_locality=ps.SIGNER_LOCALITY,
                )
                attempts.append("resident key: signed")
            except tpm_sim.PolicyUnsatisfied as exc:
                attempts.append(f"resident key: {exc.reason}")
        if sig is None:
            try:
                ps.exec_process(state, adv, ps.TPM_SIGN_PATH)
                attempts.append("exec tpm_sign: allowed")
            except ps.ExecDenied as exc:
                attempts.append(f"exec tpm_sign: {type(exc).__name__}")
        if sig is None:
            return Outcome("adversary_sign", "; ".join(attempts) or "no route", adversary_signed=False)
        verdict = self._appraise(cp.seal_bundle(unsigned, lambda _b: sig.value), nonce)
        out = self._verdict_outcome(verdict)
        out.kind = "adversary_sign"
        out.detail = "; ".join(attempts) + f"; forged bundle {out.detail}"
        out.adversary_signed = verdict.signature_ok
        return out

    def step_exec(self, args: list[str]) -> Outcome:
        domain, path = args[0], args[1]
        state = self.deployment.platform
        try:
            proc = ps.exec_process(state, state.pid_of(domain), path)
        except ps.DeniedByIma as exc:
            return Outcome("denied_by_ima", path, denied_path=exc.path)
        except ps.DeniedByPolicy as exc:
            return Outcome("denied_by_policy", path, denied_path=exc.path)
        state.exit(proc.pid)
        return Outcome("exec", f"{path} as {proc.domain}")

    def step_pipeline(self, args: list[str]) -> Outcome:
        """Push one message through intake, rewrite, filter and export.

        Each stage is a fresh process that handles the message and exits, so
        anything a hostile message does to a stage dies with it.
        """
        state = self.deployment.platform
        message = (args[0] if args else "hello").encode()
        ps.adversary_act(state, ps.Action("corrupt_file", "/cds/spool/inbox", message))
        stages = [
            ("/cds/bin/intake", "/cds/spool/inbox", "/cds/spool/rewrite_in"),
            ("/cds/bin/rewrite", "/cds/spool/rewrite_in", "/cds/spool/filter_in"),
            ("/cds/bin/filter", "/cds/spool/filter_in", "/cds/spool/export_in"),
            ("/cds/bin/export", "/cds/spool/export_in", "/cds/spool/outbox"),
        ]
        parent = state.pid_of("admin_t")
        chain: list[int] = []
        try:
            for binary, inbound, outbound in stages:
                proc = ps.exec_process(state, parent, binary)
                chain.append(proc.pid)
                data = ps.read_as(state, proc.pid, inbound)
                obj = state.fs[outbound]
                if not (state.kernel.corrupted or proc.domain in obj.writable_by):
                    raise ps.ActionDenied(f"{proc.domain} may not write {outbound}")
                obj.contents = data
                parent = proc.pid
        except ps.DeniedByIma as exc:
            return Outcome("denied_by_ima", exc.path, denied_path=exc.path)
        except ps.ExecDenied as exc:
            return Outcome("denied_by_policy", exc.path, denied_path=exc.path)
        finally:
            for pid in chain:
                state.exit(pid)
        alive = sum(1 for p in state.processes.values() if p.domain in ("intake_t", "rewrite_t", "filter_t", "export_t"))
        delivered = state.fs["/cds/spool/outbox"].contents == message
        return Outcome("pipeline", "delivered" if delivered else "lost", cds_alive=alive)

    def step_analyze(self, args: list[str]) -> Outcome:
        if not args:
            raise ValueError("analyze needs a graph file")
        text = self._path(args[0]).read_text()
        spec = aa.AdversarySpec()
        rest = args[1:]
        if rest and rest[0] not in ("without",):
            spec_text = self._path(rest[0]).read_text()
            parsed = aa.parse_analysis_text(spec_text)
            spec = parsed.spec or spec
            rest = rest[1:]
        graph = aa.parse_analysis_text(text).graph
        if rest[:1] == ["without"]:
            wanted = rest[1]
            matches = [s for name, s in spec.rules() if name == wanted]
            if not matches:
                raise ValueError(f"spec has no rule {wanted!r}")
            spec = matches[0]
        attacks = aa.find_attacks(graph, spec)
        return Outcome("analysis", f"{len(attacks)} attacks", attack_count=len(attacks))

    # -- expectations -----------------------------------------------------------

    def check(self, words: tuple[str, ...]) -> tuple[bool, str]:
        pred, args = words[0], list(words[1:])
        out = self.out
        got = f"{out.kind}: {out.detail}" if out.detail else out.kind
        if pred in ("released", "withheld", "no-blob"):
            return out.release == pred, got
        if pred == "passed":
            return out.verdict is not None and out.verdict.passed, got
        if pred == "failed":
            v = out.verdict
            if v is None or v.passed:
                return False, got
            if not args:
                return True, got
            what = args[0]
            if what == "nonce":
                return not v.nonce_ok, got
            if what == "signature":
                return not v.signature_ok, got
            if what == "shape":
                return not v.shape_ok, got
            if what == "target":
                return tuple(args[1:3]) in v.failed_targets(), got
            return any(a == what for a, _ in v.failed_targets()), got
        if pred == "signing_denied":
            ok = out.kind == "signing_denied" and (not args or out.detail == args[0])
            return ok, got
        if pred == "unavailable":
            return out.kind == "unavailable", got
        if pred in ("denied_by_ima", "denied_by_policy"):
            kind_ok = out.kind == pred or (pred == "denied_by_ima" and out.kind == "unavailable" and out.denied_path)
            return bool(kind_ok) and (not args or out.denied_path == args[0]), got
        if pred == "action_denied":
            return out.kind == "action_denied", got
        if pred == "loot":
            return out.kind == "loot" and (not args or out.detail == args[0]), got
        if pred == "attack_count":
            if out.attack_count is None:
                return False, got
            want = args[0]
            ok = out.attack_count > 0 if want == ">0" else out.attack_count == int(want)
            return ok, got
        if pred == "adversary_can_sign":
            return out.adversary_signed is True, got
        if pred == "adversary_cannot_sign":
            return out.adversary_signed is False, got
        if pred == "pcr_changed":
            want = {int(a) for a in args}
            return out.changed_pcrs == want, f"{got}; changed {sorted(out.changed_pcrs or ())}"
        if pred == "delivered":
            return out.kind == "pipeline" and out.detail == "delivered", got
        if pred == "cds_processes":
            return out.cds_alive == int(args[0]), f"{got}; {out.cds_alive} alive"
        if pred == "kernel":
            state = self.deployment.platform
            return ("corrupted" if state.kernel.corrupted else "clean") == args[0], got
        raise ValueError(f"unknown predicate {pred!r}")

    # -- driver -----------------------------------------------------------------

    def run_lines(self, lines: list[Line]) -> ScenarioResult:
        failures: list[str] = []
        report: list[str] = []
        for k, line in enumerate(lines, 1):
            if line.kind == "step":
                handler: Callable[[list[str]], Outcome] = getattr(self, STEP_VERBS[line.words[0]])
                try:
                    self.out = handler(list(line.words[1:]))
                except (ps.PlatformError, cp.ProtocolError, tpm_sim.TpmError, aa.AnalysisError,
                        ValueError, IndexError, KeyError, FileNotFoundError) as exc:
                    msg = f"{type(exc).__name__}: {exc}"
                    report.append(f"[{k:02d}] step {line.text} -> ERROR {msg}")
                    failures.append(str(StepFailed(k, msg)))
                    self.out = Outcome("error", msg)
                    continue
                shown = f"{self.out.kind}: {self.out.detail}" if self.out.detail else self.out.kind
                report.append(f"[{k:02d}] step {line.text} -> {shown}")
            else:
                try:
                    ok, got = self.check(line.words)
                except (ValueError, IndexError) as exc:
                    ok, got = False, f"bad predicate: {exc}"
                report.append(f"[{k:02d}] expect {line.text} ... {'OK' if ok else 'FAIL'} ({got})")
                if not ok:
                    failures.append(f"line {line.number}: expect {line.text} (got {got})")
        verdict = "PASS" if not failures else "FAIL"
        report.append(f"scenario {verdict}: {len(lines)} lines, {len(failures)} failures")
        return ScenarioResult(EXIT_OK if not failures else EXIT_FAILED, "\n".join(report) + "\n", failures)


STEP_VERBS = {
    "provision": "step_provision",
    "boot": "step_boot",
    "attack": "step_attack",
    "attest": "step_attest",
    "replay": "step_replay",
    "forge_foreign": "step_forge_foreign",
    "adversary_sign": "step_adversary_sign",
    "exec": "step_exec",
    "pipeline": "step_pipeline",
    "analyze": "step_analyze",
}

EXPECT_PREDICATES = {
    "released", "withheld", "no-blob", "passed", "failed", "signing_denied", "unavailable",
    "denied_by_ima", "denied_by_policy", "action_denied", "loot", "attack_count",
    "adversary_can_sign", "adversary_cannot_sign", "pcr_changed", "delivered", "cds_processes",
    "kernel",
}


def run_scenario(path: Path | str, seed: int = 0) -> ScenarioResult:
    """Run a scenario file. Parse errors raise ``ScenarioParseError``."""
    path = Path(path)
    lines = parse_scenario(path.read_text(encoding="utf-8"))
    runner = ScenarioRunner(path.parent, seed)
    return runner.run_lines(lines)


def run_scenario_text(text: str, base_dir: Path | None = None, seed: int = 0) -> ScenarioResult:
    return ScenarioRunner(base_dir, seed).run_lines(parse_scenario(text))


def replay_steps(lines: list[Line], seed: int = 0) -> ScenarioRunner:
    """Re-execute steps (ignoring expectations) to rebuild a session."""
    runner = ScenarioRunner(None, seed)
    runner.run_lines([line for line in lines if line.kind == "step"])
    return runner

