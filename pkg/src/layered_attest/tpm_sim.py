"""Simulated TPM: wrapped signing keys, usage policies, signing sessions, quotes.

Keys are Ed25519 pairs. Secrets leave the device only inside AES-GCM blobs
keyed by a storage root generated when the ``Tpm`` is constructed. A blob
presented for signing is loaded for that one command and flushed afterwards.
"""

from __future__ import annotations

import itertools
import logging
import random
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

from . import canonical
from .canonical import BLOB_MAGIC, DecodeError, Reader, Writer
from .digest_core import Digest, PcrBank, bank_digest, hash_bytes, NUM_PCRS

log = logging.getLogger(__name__)

PCR_MISMATCH = "pcr_mismatch"
LOCALITY_MISMATCH = "locality_mismatch"
BAD_DELEGATION = "bad_delegation"

DEFAULT_QUOTE_PCRS = (4, 7, 8, 9, 11)
INNER = "inner"
OUTER = "outer"


class TpmError(Exception):
    pass


class DuplicateKeyId(TpmError):
    pass


class UnknownKey(TpmError):
    pass


class WrongLayer(TpmError):
    pass


class UnwrapFailed(TpmError):
    """Authenticated decryption rejected the blob."""


class MissingDelegatedDoc(TpmError):
    pass


class SessionFlushed(TpmError):
    pass


class PolicyUnsatisfied(TpmError):
    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


class BadDelegationSignature(PolicyUnsatisfied):
    def __init__(self, detail: str = "") -> None:
        super().__init__(BAD_DELEGATION)
        self.detail = detail


# ---------------------------------------------------------------------------
# policies and records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UsagePolicy:
    required_pcrs: tuple[tuple[int, Digest], ...] = ()
    required_locality: Optional[int] = None
    delegation_fingerprint: Optional[Digest] = None

    def __post_init__(self) -> None:
        pcrs = tuple(sorted(dict(self.required_pcrs).items()))
        for i, _ in pcrs:
            if not 0 <= i < NUM_PCRS:
                raise ValueError(f"PCR index {i} outside 0..{NUM_PCRS - 1}")
        if self.required_locality is not None and not 0 <= self.required_locality <= 255:
            raise ValueError("locality must be in 0..255")
        object.__setattr__(self, "required_pcrs", pcrs)

    @classmethod
    def build(
        cls,
        pcrs: Mapping[int, Digest] | None = None,
        locality: int | None = None,
        delegated_to: Digest | None = None,
    ) -> UsagePolicy:
        return cls(tuple((pcrs or {}).items()), locality, delegated_to)

    @classmethod
    def from_bank(
        cls, bank: PcrBank, indices: Sequence[int] = DEFAULT_QUOTE_PCRS, locality: int | None = None
    ) -> UsagePolicy:
        return cls.build({i: bank[i] for i in indices}, locality)

    @property
    def kind(self) -> str:
        return "immediate" if self.delegation_fingerprint is None else "delegated"

    def encode(self) -> bytes:
        w = Writer().u32(len(self.required_pcrs))
        for i, d in self.required_pcrs:
            w.u8(i).digest(d)
        w.u8(0 if self.required_locality is None else 1).u8(self.required_locality or 0)
        w.text(self.kind)
        if self.delegation_fingerprint is not None:
            w.digest(self.delegation_fingerprint)
        return w.getvalue()

    @classmethod
    def decode_from(cls, r: Reader) -> UsagePolicy:
        n = r.u32()
        if n > NUM_PCRS:
            raise DecodeError("too many PCR requirements")
        pcrs = tuple((r.u8(), r.digest()) for _ in range(n))
        has_loc, loc = r.u8(), r.u8()
        kind = r.text()
        fpr = r.digest() if kind == "delegated" else None
        if kind not in ("immediate", "delegated"):
            raise DecodeError(f"unknown policy kind {kind!r}")
        try:
            return cls(pcrs, loc if has_loc else None, fpr)
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc

    @classmethod
    def decode(cls, data: bytes) -> UsagePolicy:
        r = Reader(data)
        p = cls.decode_from(r)
        r.expect_end()
        return p


@dataclass(frozen=True)
class KeyRecord:
    key_id: str
    signing_secret: bytes = field(repr=False)
    verify_key: bytes
    policy: UsagePolicy

    def _encode(self) -> bytes:
        # Only ever passed to the wrapping cipher.
        return (
            Writer()
            .text(self.key_id)
            .raw(self.signing_secret)
            .raw(self.verify_key)
            .raw(self.policy.encode())
            .getvalue()
        )

    @classmethod
    def _decode(cls, data: bytes) -> KeyRecord:
        r = Reader(data)
        rec = cls(r.text(), r.raw(), r.raw(), UsagePolicy.decode(r.raw()))
        r.expect_end()
        return rec


@dataclass(frozen=True)
class WrappedBlob:
    ciphertext: bytes
    wrapping_key_id: str
    layer: str
    gate: Optional[UsagePolicy] = None  # outer layer only; authenticated as AAD

    def to_bytes(self) -> bytes:
        w = Writer().text("blob").text(self.layer).text(self.wrapping_key_id).raw(self.ciphertext)
        w.raw(self.gate.encode() if self.gate is not None else b"")
        return BLOB_MAGIC + w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> WrappedBlob:
        r = Reader(canonical.strip_magic(data, BLOB_MAGIC))
        if r.text() != "blob":
            raise DecodeError("not a blob")
        layer, wk, ct, gate = r.text(), r.text(), r.raw(), r.raw()
        r.expect_end()
        if layer not in (INNER, OUTER):
            raise DecodeError(f"bad layer {layer!r}")
        return cls(ct, wk, layer, UsagePolicy.decode(gate) if gate else None)

    def aad(self) -> bytes:
        w = Writer().text(self.layer).text(self.wrapping_key_id)
        w.raw(self.gate.encode() if self.gate is not None else b"")
        return w.getvalue()


@dataclass(frozen=True)
class DelegatedPolicyDoc:
    policy: UsagePolicy
    signature: bytes
    signer_fingerprint: Digest
    signer_key: bytes


class PolicySigner:
    """Holder of a policy-certifying key (lives outside any TPM)."""

    def __init__(self, secret: bytes) -> None:
        self._key = Ed25519PrivateKey.from_private_bytes(secret)
        self.verify_key = _public_bytes(self._key)
        self.fingerprint = fingerprint(self.verify_key)

    def certify(self, policy: UsagePolicy) -> DelegatedPolicyDoc:
        return DelegatedPolicyDoc(
            policy, self._key.sign(policy.encode()), self.fingerprint, self.verify_key
        )


@dataclass(frozen=True)
class Command:
    verb: str
    payload: bytes
    source_locality: int = 0
    session: Optional[int] = None

    def __post_init__(self) -> None:
        if self.verb not in ("sign", "unwrap", "quote", "load"):
            raise ValueError(f"unknown verb {self.verb!r}")
        if not 0 <= self.source_locality <= 255:
            raise ValueError("locality must be in 0..255")


@dataclass(frozen=True)
class Signature:
    key_id: str
    value: bytes
    session: int


@dataclass(frozen=True)
class Quote:
    indices: tuple[int, ...]
    pcr_digest: Digest
    nonce: Digest
    key_id: str
    signature: bytes

    def body(self) -> bytes:
        return quote_body(self.indices, self.pcr_digest, self.nonce, self.key_id)

    def to_bytes(self) -> bytes:
        w = Writer().text("quote").raw(bytes(self.indices)).digest(self.pcr_digest)
        w.digest(self.nonce).text(self.key_id).raw(self.signature)
        return BLOB_MAGIC + w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> Quote:
        r = Reader(canonical.strip_magic(data, BLOB_MAGIC))
        if r.text() != "quote":
            raise DecodeError("not a quote")
        q = cls(tuple(r.raw()), r.digest(), r.digest(), r.text(), r.raw())
        r.expect_end()
        return q


def quote_body(indices: Sequence[int], pcr_digest: Digest, nonce: Digest, key_id: str) -> bytes:
    return Writer().text("quote-body").raw(bytes(indices)).digest(pcr_digest).digest(nonce).text(key_id).getvalue()


# ---------------------------------------------------------------------------
# pure helpers
# ---------------------------------------------------------------------------


def _public_bytes(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def fingerprint(verify_key: bytes) -> Digest:
    return hash_bytes(verify_key)


def verify_signature(verify_key: bytes, payload: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(verify_key).verify(signature, payload)
    except (InvalidSignature, ValueError):
        return False
    return True


def verify_quote(quote: Quote, verify_key: bytes) -> bool:
    return verify_signature(verify_key, quote.body(), quote.signature)


def evaluate_policy(
    policy: UsagePolicy,
    bank: PcrBank,
    locality: int,
    delegated_doc: DelegatedPolicyDoc | None = None,
) -> Optional[str]:
    """Return None when satisfied, otherwise the violation reason.

    A delegated policy defers to the signed document; a document whose signer
    does not match the fingerprint raises ``BadDelegationSignature``.
    """
    if policy.kind == "delegated":
        if delegated_doc is None:
            raise MissingDelegatedDoc("delegated policy needs a signed policy document")
        doc = delegated_doc
        if fingerprint(doc.signer_key) != policy.delegation_fingerprint:
            raise BadDelegationSignature("signer fingerprint does not match the key's delegation")
        if doc.signer_fingerprint != policy.delegation_fingerprint:
            raise BadDelegationSignature("document names a different signer")
        if not verify_signature(doc.signer_key, doc.policy.encode(), doc.signature):
            raise BadDelegationSignature("document signature does not verify")
        # the document's own kind is ignored: it is applied as an immediate policy
        policy = UsagePolicy(doc.policy.required_pcrs, doc.policy.required_locality)
    for i, want in policy.required_pcrs:
        if bank[i] != want:
            return PCR_MISMATCH
    if policy.required_locality is not None and policy.required_locality != locality:
        return LOCALITY_MISMATCH
    return None


# ---------------------------------------------------------------------------
# the device
# ---------------------------------------------------------------------------


class Tpm:
    STORAGE_KEY = "srk"
    OUTER_KEY = "srk.outer"

    def __init__(
        self,
        seed: int | None = None,
        secret_source: Callable[[], bytes] | None = None,
    ) -> None:
        self._rng = random.Random(seed) if seed is not None else random.SystemRandom()
        self._secret_source = secret_source or (lambda: self._rng.randbytes(32))
        root = self._rng.randbytes(32)
        self._wrap_keys = {
            self.STORAGE_KEY: AESGCM(hash_bytes(b"inner-wrap" + root).value),
            self.OUTER_KEY: AESGCM(hash_bytes(b"outer-wrap" + root).value),
        }
        self._verify_keys: dict[str, bytes] = {}
        self._persistent: dict[str, KeyRecord] = {}
        self._session_ids = itertools.count(1)
        self._closed_sessions: set[int] = set()
        self._lock = threading.RLock()

    # -- keys ---------------------------------------------------------------

    def create_key(
        self, key_id: str, policy: UsagePolicy, persistent: bool = False
    ) -> tuple[WrappedBlob, bytes]:
        with self._lock:
            if key_id in self._verify_keys:
                raise DuplicateKeyId(key_id)
            sk = Ed25519PrivateKey.from_private_bytes(self._secret_source())
            vk = _public_bytes(sk)
            secret = sk.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())
            record = KeyRecord(key_id, secret, vk, policy)
            self._verify_keys[key_id] = vk
            if persistent:
                self._persistent[key_id] = record
            blob = self._seal(record._encode(), self.STORAGE_KEY, INNER, None)
            log.debug("created key %s (%s policy)", key_id, policy.kind)
            return blob, vk

    def verify_key(self, key_id: str) -> bytes:
        try:
            return self._verify_keys[key_id]
        except KeyError:
            raise UnknownKey(key_id) from None

    def double_wrap(self, inner: WrappedBlob, outer_policy: UsagePolicy) -> WrappedBlob:
        if inner.layer != INNER:
            raise WrongLayer(f"expected an inner blob, got {inner.layer}")
        with self._lock:
            return self._seal(inner.to_bytes(), self.OUTER_KEY, OUTER, outer_policy)

    def unwrap(
        self,
        outer: WrappedBlob,
        bank: PcrBank,
        locality: int = 0,
        delegated_doc: DelegatedPolicyDoc | None = None,
    ) -> WrappedBlob:
        if outer.layer != OUTER or outer.gate is None:
            raise WrongLayer("only gated outer blobs can be unwrapped")
        with self._lock:
            reason = evaluate_policy(outer.gate, bank, locality, delegated_doc)
            if reason is not None:
                raise PolicyUnsatisfied(reason)
            return WrappedBlob.from_bytes(self._open(outer))

    # -- signing ------------------------------------------------------------

    def signing_session(
        self,
        command: Command,
        bank: PcrBank,
        blob: WrappedBlob | None = None,
        handle: str | None = None,
        delegated_doc: DelegatedPolicyDoc | None = None,
    ) -> Signature:
        if command.verb != "sign":
            raise ValueError("signing_session needs a sign command")
        with self._lock:
            record, session = self._load(command, blob, handle)
            try:
                reason = evaluate_policy(record.policy, bank, command.source_locality, delegated_doc)
                if reason is not None:
                    raise PolicyUnsatisfied(reason)
                sk = Ed25519PrivateKey.from_private_bytes(record.signing_secret)
                return Signature(record.key_id, sk.sign(command.payload), session)
            finally:
                self._closed_sessions.add(session)

    def quote(
        self,
        bank: PcrBank,
        indices: Sequence[int],
        nonce: Digest,
        locality: int = 0,
        blob: WrappedBlob | None = None,
        handle: str | None = None,
        delegated_doc: DelegatedPolicyDoc | None = None,
    ) -> Quote:
        indices = tuple(indices)
        digest = bank_digest(bank, indices)
        command = Command("quote", nonce.value, locality)
        with self._lock:
            record, session = self._load(command, blob, handle)
            try:
                reason = evaluate_policy(record.policy, bank, locality, delegated_doc)
                if reason is not None:
                    raise PolicyUnsatisfied(reason)
                sk = Ed25519PrivateKey.from_private_bytes(record.signing_secret)
                body = quote_body(indices, digest, nonce, record.key_id)
                return Quote(indices, digest, nonce, record.key_id, sk.sign(body))
            finally:
                self._closed_sessions.add(session)

    # -- internals ----------------------------------------------------------

    def _load(
        self, command: Command, blob: WrappedBlob | None, handle: str | None
    ) -> tuple[KeyRecord, int]:
        if blob is not None:
            if blob.layer != INNER:
                raise WrongLayer("signing needs the inner blob")
            record = KeyRecord._decode(self._open(blob))
        elif handle is not None:
            if handle not in self._persistent:
                if handle in self._verify_keys:
                    raise SessionFlushed(f"key {handle} is not resident; present its blob")
                raise UnknownKey(handle)
            record = self._persistent[handle]
        else:
            raise SessionFlushed(
                f"session {command.session} ended; no key is loaded"
                if command.session is not None
                else "no key blob presented"
            )
        return record, next(self._session_ids)

    def _seal(self, plaintext: bytes, key_id: str, layer: str, gate: UsagePolicy | None) -> WrappedBlob:
        shell = WrappedBlob(b"", key_id, layer, gate)
        nonce = self._rng.randbytes(12)
        ct = self._wrap_keys[key_id].encrypt(nonce, plaintext, shell.aad())
        return WrappedBlob(nonce + ct, key_id, layer, gate)

    def _open(self, blob: WrappedBlob) -> bytes:
        cipher = self._wrap_keys.get(blob.wrapping_key_id)
        if cipher is None:
            raise UnwrapFailed(f"unknown wrapping key {blob.wrapping_key_id!r}")
        try:
            return cipher.decrypt(blob.ciphertext[:12], blob.ciphertext[12:], blob.aad())
        except (InvalidTag, ValueError) as exc:
            raise UnwrapFailed("blob failed authentication") from exc
