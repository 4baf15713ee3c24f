"""SHA-256 digests and an extend-only PCR register file.

Everything here is a pure value: a ``PcrBank`` is never mutated, ``extend``
returns a fresh bank and records the extend in the bank's log so the bank can
be rebuilt from scratch.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

DIGEST_SIZE = 32
NUM_PCRS = 24


class IndexOutOfRange(ValueError):
    pass


class EmptySelection(ValueError):
    pass


class UnsortedSelection(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Digest:
    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, bytes) or len(self.value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes")

    @classmethod
    def parse(cls, text: str) -> Digest:
        text = text.strip()
        if len(text) != 2 * DIGEST_SIZE or text != text.lower():
            raise ValueError(f"not a 64-char lowercase hex digest: {text!r}")
        return cls(bytes.fromhex(text))

    @classmethod
    def zero(cls) -> Digest:
        return cls(bytes(DIGEST_SIZE))

    def hex(self) -> str:
        return self.value.hex()

    def __str__(self) -> str:
        return self.hex()

    def __repr__(self) -> str:
        return f"Digest({self.hex()[:16]}...)"


def hash_bytes(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def _check_index(index: int) -> None:
    if not isinstance(index, int) or not 0 <= index < NUM_PCRS:
        raise IndexOutOfRange(f"PCR index {index!r} outside 0..{NUM_PCRS - 1}")


@dataclass(frozen=True)
class PcrBank:
    """Immutable bank of 24 registers plus the extend log that produced it."""

    _registers: tuple[Digest, ...] = field(
        default_factory=lambda: (Digest.zero(),) * NUM_PCRS
    )
    log: tuple[tuple[int, Digest], ...] = ()

    def __getitem__(self, index: int) -> Digest:
        _check_index(index)
        return self._registers[index]

    @property
    def registers(self) -> dict[int, Digest]:
        return dict(enumerate(self._registers))

    def differing(self, other: PcrBank) -> set[int]:
        return {i for i in range(NUM_PCRS) if self[i] != other[i]}

    def __eq__(self, other: object) -> bool:
        # The log is provenance only; two banks are equal when their registers are.
        if not isinstance(other, PcrBank):
            return NotImplemented
        return self._registers == other._registers

    def __hash__(self) -> int:
        return hash(self._registers)


def reset_bank() -> PcrBank:
    return PcrBank()


def extend(bank: PcrBank, index: int, value: Digest) -> PcrBank:
    _check_index(index)
    regs = list(bank._registers)
    regs[index] = hash_bytes(regs[index].value + value.value)
    return PcrBank(tuple(regs), bank.log + ((index, value),))


def replay(log: Iterable[tuple[int, Digest]]) -> PcrBank:
    bank = reset_bank()
    for index, value in log:
        bank = extend(bank, index, value)
    return bank


def bank_digest(bank: PcrBank, indices: Sequence[int]) -> Digest:
    indices = list(indices)
    if not indices:
        raise EmptySelection("PCR selection is empty")
    for i in indices:
        _check_index(i)
    if any(a >= b for a, b in zip(indices, indices[1:])):
        raise UnsortedSelection(f"PCR selection {indices} is not strictly increasing")
    return hash_bytes(b"".join(bytes([i]) + bank[i].value for i in indices))
