"""Provisioning: TPM, attestation key, golden values and a booted platform.

A ``Deployment`` is the bundle of live objects every front end (CLI,
scenarios, daemon, tests) works against.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from . import copland_proto as cp
from . import platform_sim as ps
from . import tpm_sim
from .appraisal import GoldenStore
from .digest_core import Digest, PcrBank, bank_digest, extend, hash_bytes, replay

ASK_ID = "ask"
KEY_MODES = ("stopgap", "locality")


def expected_banks(inputs: Mapping[str, bytes]) -> tuple[PcrBank, PcrBank]:
    pre = replay(ps.boot_extend_log(inputs))
    post = extend(pre, ps.RELEASE_PCR, hash_bytes(ps.RELEASE_MARK))
    return pre, post


@dataclass
class Deployment:
    tpm: tpm_sim.Tpm
    platform: ps.PlatformState
    key_mode: str
    signer: cp.SignerConfig
    store: GoldenStore
    protocol: cp.Term
    golden_pre: PcrBank
    golden_post: PcrBank
    seed: int
    rng: random.Random = field(repr=False)
    quote_pcrs: Optional[tuple[int, ...]] = None

    def fresh_nonce(self) -> Digest:
        return Digest(self.rng.randbytes(32))

    def boot(self, inputs: Mapping[str, bytes] | None = None) -> str:
        """Boot (optionally from other inputs) and run key release; returns the outcome."""
        state = self.platform
        if state.phase != ps.PRE_BOOT:
            ps.adversary_act(state, ps.Action("reboot", inputs=inputs))
        elif inputs is not None:
            state.boot_inputs.update(inputs)
        ps.measured_boot(state)
        ps.key_release(state, self.tpm, self.signer.outer_blob)
        return state.release_outcome or ""

    def attest(self, nonce: Digest, seed: int | None = None) -> cp.EvidenceBundle:
        return cp.execute(
            self.protocol,
            self.platform,
            self.tpm,
            nonce,
            signer=self.signer,
            seed=self.seed if seed is None else seed,
            quote_pcrs=self.quote_pcrs,
        )


def measure_golden(platform: ps.PlatformState, protocol: cp.Term) -> dict[tuple[str, str], Digest]:
    """Run each measurement service of ``protocol`` directly on a golden platform."""
    state = copy.deepcopy(platform)
    am = ps.exec_process(state, state.pid_of("admin_t"), "/usr/libexec/am_launcher")
    am = ps.exec_process(state, am.pid, "/usr/libexec/am")
    values = {}
    for leaf in cp.leaves(protocol):
        if isinstance(leaf, cp.Asp):
            service = cp.DEFAULT_ASPS[leaf.asp]
            proc = ps.exec_process(state, am.pid, service.path)
            values[(leaf.asp, leaf.target)] = service.measure(state, proc.pid, leaf.target)
            state.exit(proc.pid)
    return values


def provision(
    seed: int = 0,
    key_mode: str = "stopgap",
    protocol_text: str = cp.CANONICAL_CDS_PROTOCOL,
    fixtures: Path | None = None,
    secret_source=None,
    quote_pcrs: Optional[tuple[int, ...]] = None,
) -> Deployment:
    """Create keys against the golden boot inputs, record golden values, and
    leave an un-booted platform holding the golden inputs."""
    if key_mode not in KEY_MODES:
        raise ValueError(f"key mode must be one of {KEY_MODES}")
    inputs = ps.golden_boot_inputs(fixtures)
    files = ps.golden_files(fixtures)
    pre, post = expected_banks(inputs)
    tpm = tpm_sim.Tpm(seed=seed, secret_source=secret_source)

    if key_mode == "stopgap":
        inner, vk = tpm.create_key(ASK_ID, tpm_sim.UsagePolicy.from_bank(post))
        outer = tpm.double_wrap(inner, tpm_sim.UsagePolicy.from_bank(pre))
        signer = cp.SignerConfig(ASK_ID, outer_blob=outer)
    else:
        policy = tpm_sim.UsagePolicy.from_bank(post, locality=ps.SIGNER_LOCALITY)
        _, vk = tpm.create_key(ASK_ID, policy, persistent=True)
        signer = cp.SignerConfig(ASK_ID, use_handle=True)

    protocol = cp.parse(protocol_text)
    reference = ps.new_platform(inputs, files, key_mode)
    ps.measured_boot(reference)
    reference.bank = post
    store = GoldenStore(
        measure_golden(reference, protocol),
        {ASK_ID: vk},
        quote_digest=bank_digest(post, quote_pcrs) if quote_pcrs else None,
    )
    platform = ps.new_platform(inputs, files, key_mode)
    return Deployment(
        tpm, platform, key_mode, signer, store, protocol, pre, post, seed,
        random.Random(f"nonce:{seed}"), quote_pcrs,
    )
