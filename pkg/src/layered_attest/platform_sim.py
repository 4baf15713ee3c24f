"""One simulated attestation target.

``PlatformState`` bundles the PCR bank, a labeled filesystem, live processes,
the loaded access/integrity policy and kernel flags. The operations below
mutate a state in place and return it, appending every action to
``state.action_log`` so a run can be replayed from its log.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional

from . import canonical, tpm_sim
from .digest_core import Digest, PcrBank, extend, hash_bytes, reset_bank

log = logging.getLogger(__name__)

PRE_BOOT = "pre-boot"
BOOTING = "booting"
PRE_RELEASE = "pre-release"
POST_RELEASE = "post-release"

_NEXT_PHASE = {PRE_BOOT: BOOTING, BOOTING: PRE_RELEASE, PRE_RELEASE: POST_RELEASE}

BOOT_INPUTS = (
    "shim",
    "sec_boot_cfg",
    "grub",
    "argv",
    "initramfs",
    "kernel",
    "systemd",
    "selinux_policy",
    "ima_policy",
)

# (register, input) in the order the firmware, loaders and init extend them
BOOT_SEQUENCE: tuple[tuple[int, str], ...] = (
    (4, "shim"),
    (7, "sec_boot_cfg"),
    (4, "grub"),
    (8, "argv"),
    (9, "initramfs"),
    (9, "kernel"),
    (11, "systemd"),
    (11, "selinux_policy"),
    (11, "ima_policy"),
)

RELEASE_PCR = 11
RELEASE_MARK = b"ok"

ASK_BLOB_PATH = "/var/lib/attest/ask.blob"
TPM_SIGN_PATH = "/asp/tpm_sign"
SIGNER_LOCALITY = 40

DOMAINS = (
    "intake_t",
    "rewrite_t",
    "filter_t",
    "export_t",
    "am_launcher_t",
    "am_t",
    "asp_t",
    "tpm_sign_t",
    "adversary_t",
    "admin_t",
)

RELEASED = "released"
WITHHELD = "withheld"
NO_BLOB = "no-blob"


class PlatformError(Exception):
    pass


class PhaseError(PlatformError):
    pass


class ExecDenied(PlatformError):
    def __init__(self, path: str, detail: str) -> None:
        super().__init__(f"{path}: {detail}")
        self.path = path


class DeniedByPolicy(ExecDenied):
    pass


class DeniedByIma(ExecDenied):
    pass


class ActionDenied(PlatformError):
    pass


class NoSuchProcess(PlatformError):
    pass


# ---------------------------------------------------------------------------
# policy
# ---------------------------------------------------------------------------


@dataclass
class PolicyTable:
    exec_transitions: dict[tuple[str, str], str] = field(default_factory=dict)
    ima_golden: dict[str, Digest] = field(default_factory=dict)
    domain_locality: dict[str, int] = field(default_factory=dict)
    immutable: bool = False
    labels: dict[str, str] = field(default_factory=dict)
    allow: set[tuple[str, str, str]] = field(default_factory=set)  # (domain, label, perm)
    selinux_enforcing: bool = False
    ima_enforcing: bool = False

    @classmethod
    def from_texts(cls, selinux_text: bytes, ima_text: bytes) -> PolicyTable:
        """Parse the two policy documents. Malformed lines are skipped, the way
        a kernel ignores rules it cannot load."""
        table = cls()
        for words in _policy_lines(selinux_text):
            match words:
                case ["mode", mode]:
                    table.selinux_enforcing = mode == "enforcing"
                case ["immutable"]:
                    table.immutable = True
                case ["label", path, label]:
                    table.labels[path] = label
                case ["allow", domain, label, perm] if perm in ("read", "write"):
                    table.allow.add((domain, label, perm))
                case ["exec", parent, path, child]:
                    table.exec_transitions[(parent, path)] = child
                case ["locality", domain, value] if value.isdigit() and int(value) < 256:
                    table.domain_locality[domain] = int(value)
                case _:
                    log.debug("ignored policy line %r", words)
        for words in _policy_lines(ima_text):
            match words:
                case ["mode", mode]:
                    table.ima_enforcing = mode == "enforce"
                case ["appraise", path, digest]:
                    try:
                        table.ima_golden[path] = Digest.parse(digest)
                    except ValueError:
                        log.debug("ignored appraise line for %s", path)
                case _:
                    log.debug("ignored ima line %r", words)
        return table

    def readers(self, label: str) -> frozenset[str]:
        return frozenset(d for d, lab, p in self.allow if lab == label and p == "read")

    def writers(self, label: str) -> frozenset[str]:
        return frozenset(d for d, lab, p in self.allow if lab == label and p == "write")

    def encode(self) -> bytes:
        """Canonical bytes of the loaded table, independent of insertion order."""
        w = canonical.Writer()
        w.u8(int(self.selinux_enforcing)).u8(int(self.ima_enforcing)).u8(int(self.immutable))
        w.u32(len(self.labels))
        for path, label in sorted(self.labels.items()):
            w.text(path).text(label)
        w.u32(len(self.allow))
        for d, lab, p in sorted(self.allow):
            w.text(d).text(lab).text(p)
        w.u32(len(self.exec_transitions))
        for (parent, path), child in sorted(self.exec_transitions.items()):
            w.text(parent).text(path).text(child)
        w.u32(len(self.domain_locality))
        for d, loc in sorted(self.domain_locality.items()):
            w.text(d).u8(loc)
        w.u32(len(self.ima_golden))
        for path, dg in sorted(self.ima_golden.items()):
            w.text(path).digest(dg)
        return w.getvalue()


def _policy_lines(text: bytes) -> Iterable[list[str]]:
    for raw in text.decode("utf-8", errors="replace").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line.split()


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass
class FileObject:
    path: str
    contents: bytes
    label: str
    readable_by: frozenset[str] = frozenset()
    writable_by: frozenset[str] = frozenset()


@dataclass(frozen=True)
class Process:
    pid: int
    domain: str
    executable_path: str
    locality_grant: Optional[int] = None


@dataclass
class KernelFlags:
    corrupted: bool = False
    ima_enabled: bool = False
    selinux_enforcing: bool = False


@dataclass
class PlatformState:
    bank: PcrBank = field(default_factory=reset_bank)
    fs: dict[str, FileObject] = field(default_factory=dict)
    processes: dict[int, Process] = field(default_factory=dict)
    kernel: KernelFlags = field(default_factory=KernelFlags)
    phase: str = PRE_BOOT
    boot_inputs: dict[str, bytes] = field(default_factory=dict)
    policy: PolicyTable = field(default_factory=PolicyTable)
    key_mode: str = "stopgap"
    release_outcome: Optional[str] = None
    loot: dict[str, bytes] = field(default_factory=dict)
    action_log: list[tuple] = field(default_factory=list)
    _pids: Iterable[int] = field(default_factory=lambda: itertools.count(1), repr=False)

    def set_phase(self, phase: str) -> None:
        if phase != PRE_BOOT and _NEXT_PHASE.get(self.phase) != phase:
            raise PhaseError(f"illegal phase change {self.phase} -> {phase}")
        self.phase = phase

    def spawn(self, domain: str, path: str) -> Process:
        pid = next(self._pids)  # type: ignore[call-overload]
        proc = Process(pid, domain, path, self.policy.domain_locality.get(domain))
        self.processes[pid] = proc
        return proc

    def exit(self, pid: int) -> None:
        self.processes.pop(pid, None)

    def pid_of(self, domain: str) -> int:
        for proc in self.processes.values():
            if proc.domain == domain:
                return proc.pid
        raise NoSuchProcess(domain)

    def relabel(self) -> None:
        for obj in self.fs.values():
            obj.label = self.policy.labels.get(obj.path, "unlabeled_t")
            obj.readable_by = self.policy.readers(obj.label)
            obj.writable_by = self.policy.writers(obj.label)

    def put_file(self, path: str, contents: bytes) -> FileObject:
        obj = FileObject(path, contents, "unlabeled_t")
        self.fs[path] = obj
        self.relabel()
        return obj


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


def fixture_dir() -> Path:
    return Path(str(resources.files("layered_attest") / "fixtures"))


def golden_boot_inputs(root: Path | None = None) -> dict[str, bytes]:
    root = root or fixture_dir()
    return {name: (root / "boot" / name).read_bytes() for name in BOOT_INPUTS}


def golden_files(root: Path | None = None) -> dict[str, bytes]:
    base = (root or fixture_dir()) / "fs"
    return {
        "/" + p.relative_to(base).as_posix(): p.read_bytes()
        for p in sorted(base.rglob("*"))
        if p.is_file()
    }


def load_golden_banks(root: Path | None = None) -> dict[str, dict[int, Digest]]:
    banks: dict[str, dict[int, Digest]] = {}
    text = ((root or fixture_dir()) / "golden_bank.txt").read_text()
    for line in text.splitlines():
        if line.strip() and not line.startswith("#"):
            phase, index, hexd = line.split()
            banks.setdefault(phase, {})[int(index)] = Digest.parse(hexd)
    return banks


def new_platform(
    boot_inputs: Mapping[str, bytes] | None = None,
    files: Mapping[str, bytes] | None = None,
    key_mode: str = "stopgap",
) -> PlatformState:
    if key_mode not in ("stopgap", "locality"):
        raise ValueError(f"unknown key mode {key_mode!r}")
    state = PlatformState(key_mode=key_mode)
    state.boot_inputs = dict(boot_inputs if boot_inputs is not None else golden_boot_inputs())
    for path, data in (files if files is not None else golden_files()).items():
        state.fs[path] = FileObject(path, data, "unlabeled_t")
    return state


# ---------------------------------------------------------------------------
# boot and release
# ---------------------------------------------------------------------------


def boot_extend_log(inputs: Mapping[str, bytes]) -> list[tuple[int, Digest]]:
    return [(pcr, hash_bytes(inputs[name])) for pcr, name in BOOT_SEQUENCE]


def measured_boot(state: PlatformState) -> PlatformState:
    if state.phase != PRE_BOOT:
        raise PhaseError(f"boot requires {PRE_BOOT}, platform is {state.phase}")
    state.set_phase(BOOTING)
    state.action_log.append(("boot",))
    bank = reset_bank()
    for pcr, value in boot_extend_log(state.boot_inputs):
        bank = extend(bank, pcr, value)
    state.bank = bank
    state.policy = PolicyTable.from_texts(
        state.boot_inputs["selinux_policy"], state.boot_inputs["ima_policy"]
    )
    state.kernel = KernelFlags(
        corrupted=False,
        ima_enabled=state.policy.ima_enforcing,
        selinux_enforcing=state.policy.selinux_enforcing,
    )
    state.processes.clear()
    state.release_outcome = None
    state.relabel()
    state.spawn("admin_t", "/sbin/init")
    state.spawn("adversary_t", "/bin/sh")
    state.set_phase(PRE_RELEASE)
    log.info("booted; PCR11=%s", state.bank[11].hex()[:16])
    return state


def key_release(state: PlatformState, tpm: tpm_sim.Tpm, outer_blob: tpm_sim.WrappedBlob | None) -> PlatformState:
    """Unwrap the outer layer if the pre-release state holds, then close the window.

    With no outer blob (locality configuration) nothing is written; the
    release mark is still extended.
    """
    if state.phase != PRE_RELEASE:
        raise PhaseError(f"key release requires {PRE_RELEASE}, platform is {state.phase}")
    state.action_log.append(("release",))
    outcome = NO_BLOB
    if outer_blob is not None:
        try:
            inner = tpm.unwrap(outer_blob, state.bank)
        except tpm_sim.PolicyUnsatisfied as exc:
            outcome = WITHHELD
            log.info("key release withheld: %s", exc.reason)
        else:
            state.put_file(ASK_BLOB_PATH, inner.to_bytes())
            outcome = RELEASED
    state.bank = extend(state.bank, RELEASE_PCR, hash_bytes(RELEASE_MARK))
    state.release_outcome = outcome
    state.set_phase(POST_RELEASE)
    return state


# ---------------------------------------------------------------------------
# processes
# ---------------------------------------------------------------------------


def exec_process(state: PlatformState, parent_pid: int, path: str) -> Process:
    parent = state.processes.get(parent_pid)
    if parent is None:
        raise NoSuchProcess(str(parent_pid))
    state.action_log.append(("exec", parent_pid, path))
    child = state.policy.exec_transitions.get((parent.domain, path))
    bypass = state.kernel.corrupted
    if child is None:
        if not bypass and state.kernel.selinux_enforcing:
            raise DeniedByPolicy(path, f"no transition from {parent.domain}")
        child = parent.domain
    obj = state.fs.get(path)
    if obj is None:
        raise DeniedByPolicy(path, "no such file")
    golden = state.policy.ima_golden.get(path)
    if golden is not None and state.kernel.ima_enabled and not bypass:
        if hash_bytes(obj.contents) != golden:
            raise DeniedByIma(path, "digest differs from appraisal value")
    return state.spawn(child, path)


def can_read(state: PlatformState, pid: int, path: str) -> bool:
    proc = state.processes.get(pid)
    obj = state.fs.get(path)
    if proc is None or obj is None:
        return False
    return state.kernel.corrupted or not state.kernel.selinux_enforcing or proc.domain in obj.readable_by


def read_as(state: PlatformState, pid: int, path: str) -> bytes:
    if not can_read(state, pid, path):
        raise ActionDenied(f"pid {pid} may not read {path}")
    return state.fs[path].contents


def emit_command(
    state: PlatformState, pid: int, verb: str, payload: bytes, claim_locality: int | None = None
) -> tpm_sim.Command:
    """Build a TPM command as the kernel would deliver it.

    The locality comes from the sender's domain. A sender may claim another
    locality, which only a corrupted kernel will pass through.
    """
    proc = state.processes.get(pid)
    if proc is None:
        raise NoSuchProcess(str(pid))
    locality = proc.locality_grant or 0
    if claim_locality is not None and state.kernel.corrupted:
        locality = claim_locality
    return tpm_sim.Command(verb, payload, locality)


def locality_holders(state: PlatformState, locality: int = SIGNER_LOCALITY) -> set[int]:
    return {p.pid for p in state.processes.values() if p.locality_grant == locality}


def sign_as(
    state: PlatformState,
    tpm: tpm_sim.Tpm,
    pid: int,
    payload: bytes,
    blob: tpm_sim.WrappedBlob | None = None,
    handle: str | None = None,
    claim_locality: int | None = None,
) -> tpm_sim.Signature:
    command = emit_command(state, pid, "sign", payload, claim_locality)
    return tpm.signing_session(command, state.bank, blob=blob, handle=handle)


# ---------------------------------------------------------------------------
# adversary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Action:
    kind: str
    path: str = ""
    data: bytes = b""
    inputs: Optional[Mapping[str, bytes]] = None


ADVERSARY_ACTIONS = (
    "corrupt_file",
    "corrupt_kernel",
    "repair_kernel",
    "read_file",
    "reboot",
    "replace_policy",
    "disable_ima",
)


def adversary_act(state: PlatformState, action: Action) -> PlatformState:
    kind = action.kind
    state.action_log.append(("adversary", kind, action.path))
    if kind == "corrupt_kernel":
        state.kernel.corrupted = True
    elif kind == "repair_kernel":
        state.kernel.corrupted = False
    elif kind == "corrupt_file":
        obj = state.fs.get(action.path)
        if obj is None:
            raise ActionDenied(f"{action.path}: no such file")
        if not (state.kernel.corrupted or "adversary_t" in obj.writable_by):
            raise ActionDenied(f"adversary may not write {action.path}")
        obj.contents = action.data
    elif kind == "read_file":
        obj = state.fs.get(action.path)
        if obj is None:
            raise ActionDenied(f"{action.path}: no such file")
        if not (state.kernel.corrupted or "adversary_t" in obj.readable_by):
            raise ActionDenied(f"adversary may not read {action.path}")
        state.loot[action.path] = obj.contents
    elif kind in ("replace_policy", "disable_ima"):
        if state.policy.immutable and not state.kernel.corrupted:
            raise ActionDenied("loaded policy is immutable")
        if kind == "disable_ima":
            state.kernel.ima_enabled = False
            state.policy.ima_enforcing = False
        else:
            state.policy = PolicyTable.from_texts(action.data, state.boot_inputs["ima_policy"])
            state.kernel.selinux_enforcing = state.policy.selinux_enforcing
            state.processes = {
                pid: Process(p.pid, p.domain, p.executable_path, state.policy.domain_locality.get(p.domain))
                for pid, p in state.processes.items()
            }
            state.relabel()
    elif kind == "reboot":
        if action.inputs is not None:
            state.boot_inputs.update(action.inputs)
        state.kernel = KernelFlags()
        state.processes.clear()
        state.set_phase(PRE_BOOT)
    else:
        raise ActionDenied(f"unknown adversary action {kind!r}")
    return state
