"""Command-line entry point.

Stateful commands (provision, boot, attack, attest, serve, query) share a
session directory. The session is a scenario file of the steps taken so far;
each command rebuilds the deployment by replaying it, so every command is
deterministic given the provisioning seed.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import shlex
import sys
from dataclasses import replace
from pathlib import Path

from .. import appraisal
from .. import attack_analysis as aa
from .. import copland_proto as cp
from .. import netd
from .. import platform_sim as ps
from ..digest_core import Digest
from . import scenario as sc

DEFAULT_STATE = Path("attest-state")
SESSION = "session.scn"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# session directory
# ---------------------------------------------------------------------------


def _session_lines(state: Path) -> list[sc.Line]:
    path = state / SESSION
    if not path.exists():
        raise UsageError(f"{state} has no session; run 'provision' first")
    return sc.parse_scenario(path.read_text())


def _append(state: Path, words: list[str]) -> None:
    with open(state / SESSION, "a", encoding="utf-8") as fh:
        fh.write("step " + " ".join(shlex.quote(w) for w in words) + "\n")


def _rebuild(state: Path) -> sc.ScenarioRunner:
    runner = sc.ScenarioRunner(state)
    result = runner.run_lines([line for line in _session_lines(state) if line.kind == "step"])
    if result.failures:
        raise UsageError("session replay failed: " + "; ".join(result.failures))
    return runner


def _run_step(state: Path, words: list[str]) -> sc.Outcome:
    runner = _rebuild(state)
    result = runner.run_lines([sc.Line(0, "step", tuple(words))])
    if result.failures:
        raise UsageError(result.failures[0])
    _append(state, words)
    return runner.out


def fixture_manifest(root: Path | None = None) -> str:
    root = root or ps.fixture_dir()
    lines = []
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.txt" and "__pycache__" not in p.parts:
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            lines.append(f"{digest}  {p.relative_to(root).as_posix()}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_provision(args: argparse.Namespace) -> int:
    state: Path = args.state
    state.mkdir(parents=True, exist_ok=True)
    words = ["provision", args.key_mode, "seed", str(args.seed)]
    if args.quote:
        words.append("quote")
    (state / SESSION).write_text("# session log; each command replays it\n")
    runner = sc.ScenarioRunner(state)
    result = runner.run_lines([sc.Line(0, "step", tuple(words))])
    if result.failures:
        raise UsageError(result.failures[0])
    _append(state, words)
    dep = runner.deployment
    (state / "golden.txt").write_text(dep.store.dumps())
    (state / "protocol.copland").write_text(cp.render(dep.protocol) + "\n")
    manifest = fixture_manifest()
    for name in ("golden.txt", "protocol.copland"):
        manifest += f"{hashlib.sha256((state / name).read_bytes()).hexdigest()}  session/{name}\n"
    (state / "manifest.txt").write_text(manifest)
    print(f"provisioned {args.key_mode} deployment in {state} (seed {args.seed})")
    print(f"golden values: {len(dep.store.values)}; manifest: {state / 'manifest.txt'}")
    return 0


def cmd_boot(args: argparse.Namespace) -> int:
    words = ["boot"]
    for item in args.input or []:
        name, sep, file = item.partition("=")
        if not sep:
            raise UsageError(f"--input wants name=file, got {item!r}")
        words += ["replace", name, str(Path(file).resolve())]
    for item in args.flip or []:
        name, sep, offset = item.partition(":")
        if not sep or not offset.isdigit():
            raise UsageError(f"--flip wants name:offset, got {item!r}")
        words += ["flip", name, offset]
    out = _run_step(args.state, words)
    print(f"key release: {out.release}")
    changed = sorted(out.changed_pcrs or ())
    print(f"PCRs differing from golden: {' '.join(map(str, changed)) if changed else 'none'}")
    return 0


def cmd_attack(args: argparse.Namespace) -> int:
    words = ["attack", args.action] + list(args.args)
    if args.action in ("replace_policy",) or (args.action == "corrupt_file" and args.args[1:2] == ["file"]):
        words[-1] = str(Path(words[-1]).resolve())
    out = _run_step(args.state, words)
    print(f"{out.kind}: {out.detail}" if out.detail else out.kind)
    return 0 if out.kind != "action_denied" else 1


def cmd_attest(args: argparse.Namespace) -> int:
    runner = _rebuild(args.state)
    dep = runner.deployment
    term = cp.parse(Path(args.protocol).read_text()) if args.protocol else dep.protocol
    nonce = dep.fresh_nonce()
    seed = dep.seed if args.seed is None else args.seed
    try:
        bundle = cp.execute(term, dep.platform, dep.tpm, nonce, signer=dep.signer, seed=seed,
                            quote_pcrs=dep.quote_pcrs)
    except cp.SigningDenied as exc:
        _append(args.state, ["attest"])
        print(f"signing denied: {exc.reason}")
        return 1
    except cp.AspUnavailable as exc:
        _append(args.state, ["attest"])
        print(f"attestation aborted: {exc}")
        return 1
    _append(args.state, ["attest"])
    out = Path(args.out or args.state / "bundle.bin")
    out.write_bytes(bundle.to_bytes())
    out.with_name(out.name + ".nonce").write_text(nonce.hex() + "\n")
    print(f"bundle: {out} ({len(bundle.to_bytes())} bytes)")
    print(f"nonce:  {nonce.hex()}")
    return 0


def cmd_appraise(args: argparse.Namespace) -> int:
    bundle_path = Path(args.bundle)
    golden = Path(args.golden) if args.golden else args.state / "golden.txt"
    store = appraisal.GoldenStore.load(golden)
    nonce_hex = args.nonce
    if nonce_hex is None:
        side = bundle_path.with_name(bundle_path.name + ".nonce")
        if not side.exists():
            raise UsageError("no --nonce given and no .nonce file next to the bundle")
        nonce_hex = side.read_text().strip()
    protocol = Path(args.protocol) if args.protocol else args.state / "protocol.copland"
    term = cp.parse(protocol.read_text()) if protocol.exists() else cp.parse(cp.CANONICAL_CDS_PROTOCOL)
    try:
        bundle = cp.EvidenceBundle.from_bytes(bundle_path.read_bytes())
    except ValueError as exc:
        print(f"bundle does not decode: {exc}")
        return 1
    verdict = appraisal.appraise(bundle, store.with_nonce(Digest.parse(nonce_hex)), term)
    sys.stdout.write(appraisal.render_report(verdict))
    return appraisal.exit_code(verdict)


def cmd_analyze(args: argparse.Namespace) -> int:
    parsed = aa.parse_analysis_text(Path(args.graph).read_text())
    if parsed.graph is None:
        raise UsageError(f"{args.graph} has no measures: section")
    spec = parsed.spec or aa.AdversarySpec()
    query, mode = parsed.query, parsed.query_mode
    if args.spec:
        extra = aa.parse_analysis_text(Path(args.spec).read_text())
        spec = extra.spec or spec
        query = extra.query if extra.query is not None else query
        mode = extra.query_mode if extra.spec else mode
    if args.budget is not None:
        spec = replace(spec, budget=args.budget)
    if args.query:
        query = None if args.query == "any" else args.query
    if args.at_end:
        mode = aa.QUERY_AT_END
    if args.ablate or args.figure:
        report = aa.constraint_ablation(parsed.graph, spec, query, mode)
        sys.stdout.write(aa.render_attacks(list(report.base_attacks)))
        sys.stdout.write("--- ablation ---\n")
        sys.stdout.write(report.render())
        for row in report.rows:
            for k, trace in enumerate(row.attacks, 1):
                print(f"ABLATION [{row.removed}] ATTACK {k}: {trace.render()}")
        if args.figure:
            from .figures import ablation_chart

            print(f"figure: {ablation_chart(report, args.figure)}")
        return 0
    attacks = aa.find_attacks(parsed.graph, spec, query, mode)
    sys.stdout.write(aa.render_attacks(attacks))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    runner = _rebuild(args.state)
    dep = runner.deployment
    if dep.platform.phase != ps.POST_RELEASE:
        raise UsageError("platform is not booted; run 'boot' first")
    print(f"serving on {args.listen}", flush=True)
    try:
        netd.serve(args.listen, dep, replay=args.replay)
    except KeyboardInterrupt:
        pass
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    golden = Path(args.golden) if args.golden else args.state / "golden.txt"
    store = appraisal.GoldenStore.load(golden)
    protocol = args.state / "protocol.copland"
    term = cp.parse(protocol.read_text()) if protocol.exists() else cp.parse(cp.CANONICAL_CDS_PROTOCOL)
    try:
        verdict = netd.request_attestation(args.connect, args.protocol_id, store, term, args.timeout)
    except netd.AttestationRefused as exc:
        print(f"attester refused: {exc.reason}")
        return 1
    except netd.NetError as exc:
        print(f"{type(exc).__name__}: {exc}")
        return 1
    sys.stdout.write(appraisal.render_report(verdict))
    return appraisal.exit_code(verdict)


def cmd_scenario(args: argparse.Namespace) -> int:
    worst = 0
    for path in args.files:
        try:
            result = sc.run_scenario(path, seed=args.seed)
        except sc.ScenarioParseError as exc:
            print(f"{path}: {exc}", file=sys.stderr)
            worst = max(worst, sc.EXIT_USAGE)
            continue
        if len(args.files) > 1:
            print(f"== {path}")
        sys.stdout.write(result.report)
        worst = max(worst, result.exit_code)
    return worst


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layered-attest", description="Layered attestation simulator and analyzer")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_state(sp: argparse.ArgumentParser) -> argparse.ArgumentParser:
        sp.add_argument("--state", type=Path, default=DEFAULT_STATE, help="session directory")
        return sp

    sp = with_state(sub.add_parser("provision", help="create keys, golden values and a fresh session"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--key-mode", choices=("stopgap", "locality"), default="stopgap")
    sp.add_argument("--quote", action="store_true", help="attach a PCR quote to every bundle")
    sp.set_defaults(func=cmd_provision)

    sp = with_state(sub.add_parser("boot", help="measured boot and key release"))
    sp.add_argument("--input", action="append", metavar="NAME=FILE", help="boot from a replacement input")
    sp.add_argument("--flip", action="append", metavar="NAME:OFFSET", help="flip one byte of a boot input")
    sp.set_defaults(func=cmd_boot)

    sp = with_state(sub.add_parser("attack", help="apply an adversary action"))
    sp.add_argument("action", choices=ps.ADVERSARY_ACTIONS)
    sp.add_argument("args", nargs="*")
    sp.set_defaults(func=cmd_attack)

    sp = with_state(sub.add_parser("attest", help="run the protocol and write the evidence bundle"))
    sp.add_argument("--protocol", help="protocol term file (default: the provisioned one)")
    sp.add_argument("--seed", type=int, help="schedule seed for parallel branches")
    sp.add_argument("--out", help="bundle output file (default: STATE/bundle.bin)")
    sp.set_defaults(func=cmd_attest)

    sp = with_state(sub.add_parser("appraise", help="appraise an evidence bundle"))
    sp.add_argument("bundle")
    sp.add_argument("--nonce", help="expected nonce (default: BUNDLE.nonce)")
    sp.add_argument("--golden", help="golden store file (default: STATE/golden.txt)")
    sp.add_argument("--protocol", help="expected protocol term file")
    sp.set_defaults(func=cmd_appraise)

    sp = sub.add_parser("analyze", help="search for attacks on a measurement graph")
    sp.add_argument("graph")
    sp.add_argument("--spec", help="adversary constraint file")
    sp.add_argument("--ablate", action="store_true", help="rerun with each constraint removed")
    sp.add_argument("--figure", help="write an ablation bar chart to this image file")
    sp.add_argument("--query", help="component to ask about, or 'any'")
    sp.add_argument("--at-end", action="store_true", help="target must be corrupted at the end instead")
    sp.add_argument("--budget", type=int, help="adversary events per component")
    sp.set_defaults(func=cmd_analyze)

    sp = with_state(sub.add_parser("serve", help="run the attester daemon"))
    sp.add_argument("--listen", default="127.0.0.1:7461")
    sp.add_argument("--replay", action="store_true", help="answer every request with the first bundle")
    sp.set_defaults(func=cmd_serve)

    sp = with_state(sub.add_parser("query", help="challenge a remote attester and appraise the answer"))
    sp.add_argument("--connect", default="127.0.0.1:7461")
    sp.add_argument("--protocol-id", default="cds")
    sp.add_argument("--golden", help="golden store file (default: STATE/golden.txt)")
    sp.add_argument("--timeout", type=float, default=netd.DEFAULT_TIMEOUT)
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("scenario", help="run scenario files")
    sp.add_argument("files", nargs="+")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_scenario)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, aa.AnalysisError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return sc.EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
