import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layered_attest import tpm_sim
from layered_attest.digest_core import Digest, bank_digest, extend, hash_bytes, replay, reset_bank
from layered_attest.tpm_sim import (
    BadDelegationSignature,
    Command,
    DuplicateKeyId,
    MissingDelegatedDoc,
    PolicySigner,
    PolicyUnsatisfied,
    SessionFlushed,
    Tpm,
    UnwrapFailed,
    UsagePolicy,
    WrappedBlob,
    WrongLayer,
    evaluate_policy,
)

PCRS = (4, 7, 8, 9, 11)


def booted_bank(tag: bytes = b"golden"):
    return replay([(i, hash_bytes(tag + bytes([i]))) for i in PCRS])


def sign_cmd(payload=b"evidence", locality=0):
    return Command("sign", payload, locality)


def test_create_and_sign_in_matching_state():
    tpm = Tpm(seed=1)
    bank = booted_bank()
    blob, vk = tpm.create_key("ask", UsagePolicy.from_bank(bank))
    sig = tpm.signing_session(sign_cmd(), bank, blob=blob)
    assert tpm_sim.verify_signature(vk, b"evidence", sig.value)
    assert tpm.verify_key("ask") == vk


def test_duplicate_key_id():
    tpm = Tpm(seed=1)
    tpm.create_key("ask", UsagePolicy())
    with pytest.raises(DuplicateKeyId):
        tpm.create_key("ask", UsagePolicy())


def test_empty_policy_is_usable_anywhere():
    tpm = Tpm(seed=2)
    blob, vk = tpm.create_key("k", UsagePolicy())
    for bank in (reset_bank(), booted_bank(b"other")):
        sig = tpm.signing_session(sign_cmd(locality=77), bank, blob=blob)
        assert tpm_sim.verify_signature(vk, b"evidence", sig.value)


def test_perturbed_pcr_denies_with_reason():
    tpm = Tpm(seed=3)
    bank = booted_bank()
    blob, _ = tpm.create_key("ask", UsagePolicy.from_bank(bank))
    moved = extend(bank, 9, hash_bytes(b"extra"))
    with pytest.raises(PolicyUnsatisfied) as err:
        tpm.signing_session(sign_cmd(), moved, blob=blob)
    assert err.value.reason == tpm_sim.PCR_MISMATCH


def test_locality_requirement():
    tpm = Tpm(seed=4)
    bank = booted_bank()
    blob, _ = tpm.create_key("ask", UsagePolicy.from_bank(bank, locality=40))
    with pytest.raises(PolicyUnsatisfied) as err:
        tpm.signing_session(sign_cmd(locality=0), bank, blob=blob)
    assert err.value.reason == tpm_sim.LOCALITY_MISMATCH
    tpm.signing_session(sign_cmd(locality=40), bank, blob=blob)


def test_double_wrap_opens_only_in_pre_release_state():
    tpm = Tpm(seed=5)
    pre = booted_bank()
    post = extend(pre, 11, hash_bytes(b"ok"))
    inner, _ = tpm.create_key("ask", UsagePolicy.from_bank(post))
    outer = tpm.double_wrap(inner, UsagePolicy.from_bank(pre))
    assert tpm.unwrap(outer, pre) == inner
    with pytest.raises(PolicyUnsatisfied):
        tpm.unwrap(outer, post)
    with pytest.raises(WrongLayer):
        tpm.double_wrap(outer, UsagePolicy())
    with pytest.raises(WrongLayer):
        tpm.unwrap(inner, pre)
    with pytest.raises(WrongLayer):
        tpm.signing_session(sign_cmd(), post, blob=outer)


def test_blob_from_another_tpm_fails_authentication():
    a, b = Tpm(seed=6), Tpm(seed=7)
    blob, _ = a.create_key("ask", UsagePolicy())
    with pytest.raises(UnwrapFailed):
        b.signing_session(sign_cmd(), reset_bank(), blob=blob)


@given(st.integers(0, 200), st.integers(0, 7))
@settings(max_examples=40)
def test_any_ciphertext_bitflip_fails_authentication(pos, bit):
    tpm = Tpm(seed=8)
    blob, _ = tpm.create_key("ask", UsagePolicy())
    ct = bytearray(blob.ciphertext)
    ct[pos % len(ct)] ^= 1 << bit
    bad = WrappedBlob(bytes(ct), blob.wrapping_key_id, blob.layer, blob.gate)
    with pytest.raises(UnwrapFailed):
        tpm.signing_session(sign_cmd(), reset_bank(), blob=bad)


def test_blob_roundtrip_and_gate_is_authenticated():
    tpm = Tpm(seed=9)
    pre = booted_bank()
    inner, _ = tpm.create_key("ask", UsagePolicy())
    outer = tpm.double_wrap(inner, UsagePolicy.from_bank(pre))
    assert WrappedBlob.from_bytes(outer.to_bytes()) == outer
    # swapping the gate for a permissive one breaks the AEAD binding
    loose = WrappedBlob(outer.ciphertext, outer.wrapping_key_id, outer.layer, UsagePolicy.build({}))
    with pytest.raises(UnwrapFailed):
        tpm.unwrap(loose, reset_bank())


def test_flush_no_signing_without_blob():
    tpm = Tpm(seed=10)
    blob, _ = tpm.create_key("ask", UsagePolicy())
    sig = tpm.signing_session(sign_cmd(), reset_bank(), blob=blob)
    with pytest.raises(SessionFlushed):
        tpm.signing_session(Command("sign", b"again", 0, session=sig.session), reset_bank())
    with pytest.raises(SessionFlushed):
        tpm.signing_session(sign_cmd(), reset_bank(), handle="ask")


def test_persistent_handle_signs_without_blob():
    tpm = Tpm(seed=11)
    _, vk = tpm.create_key("ask", UsagePolicy(), persistent=True)
    sig = tpm.signing_session(sign_cmd(), reset_bank(), handle="ask")
    assert tpm_sim.verify_signature(vk, b"evidence", sig.value)
    with pytest.raises(tpm_sim.UnknownKey):
        tpm.signing_session(sign_cmd(), reset_bank(), handle="nope")


def test_sign_needs_sign_verb():
    tpm = Tpm(seed=12)
    blob, _ = tpm.create_key("ask", UsagePolicy())
    with pytest.raises(ValueError):
        tpm.signing_session(Command("quote", b"x"), reset_bank(), blob=blob)
    with pytest.raises(ValueError):
        Command("sign", b"x", 256)


def test_quote_verifies_and_tamper_is_caught():
    tpm = Tpm(seed=13)
    bank = booted_bank()
    blob, vk = tpm.create_key("ask", UsagePolicy())
    nonce = hash_bytes(b"nonce")
    q = tpm.quote(bank, PCRS, nonce, blob=blob)
    assert q.pcr_digest == bank_digest(bank, PCRS)
    assert tpm_sim.verify_quote(q, vk)
    assert tpm_sim.Quote.from_bytes(q.to_bytes()) == q
    forged = tpm_sim.Quote(q.indices, hash_bytes(b"other"), q.nonce, q.key_id, q.signature)
    assert not tpm_sim.verify_quote(forged, vk)


def test_delegated_policy_defers_to_signed_doc():
    signer = PolicySigner(bytes(range(32)))
    bank = booted_bank()
    policy = UsagePolicy.build(delegated_to=signer.fingerprint)
    assert policy.kind == "delegated"
    doc = signer.certify(UsagePolicy.from_bank(bank))
    assert evaluate_policy(policy, bank, 0, doc) is None
    assert evaluate_policy(policy, reset_bank(), 0, doc) == tpm_sim.PCR_MISMATCH
    with pytest.raises(MissingDelegatedDoc):
        evaluate_policy(policy, bank, 0)
    other = PolicySigner(bytes(32))
    with pytest.raises(BadDelegationSignature):
        evaluate_policy(policy, bank, 0, other.certify(UsagePolicy.from_bank(bank)))


def test_delegated_doc_with_broken_signature():
    signer = PolicySigner(bytes(range(32)))
    policy = UsagePolicy.build(delegated_to=signer.fingerprint)
    doc = signer.certify(UsagePolicy())
    broken = tpm_sim.DelegatedPolicyDoc(UsagePolicy.build(locality=3), doc.signature, doc.signer_fingerprint, doc.signer_key)
    with pytest.raises(BadDelegationSignature):
        evaluate_policy(policy, reset_bank(), 0, broken)


@given(st.booleans())
def test_delegation_substitution_tracks_fingerprints(shared):
    """A doc certified for key A works for key B exactly when both name the same signer."""
    sa = PolicySigner(bytes([1]) * 32)
    sb = sa if shared else PolicySigner(bytes([2]) * 32)
    tpm = Tpm(seed=14)
    blob_a, _ = tpm.create_key("a", UsagePolicy.build(delegated_to=sa.fingerprint))
    blob_b, vk_b = tpm.create_key("b", UsagePolicy.build(delegated_to=sb.fingerprint))
    doc_for_a = sa.certify(UsagePolicy())
    tpm.signing_session(sign_cmd(), reset_bank(), blob=blob_a, delegated_doc=doc_for_a)
    if shared:
        sig = tpm.signing_session(sign_cmd(), reset_bank(), blob=blob_b, delegated_doc=doc_for_a)
        assert tpm_sim.verify_signature(vk_b, b"evidence", sig.value)
    else:
        with pytest.raises(BadDelegationSignature):
            tpm.signing_session(sign_cmd(), reset_bank(), blob=blob_b, delegated_doc=doc_for_a)


def test_policy_invariants():
    with pytest.raises(ValueError):
        UsagePolicy.build({24: Digest.zero()})
    with pytest.raises(ValueError):
        UsagePolicy.build(locality=256)
    assert UsagePolicy().kind == "immediate" and UsagePolicy().delegation_fingerprint is None
    p = UsagePolicy.build({4: hash_bytes(b"a")}, 40, hash_bytes(b"fp"))
    assert UsagePolicy.decode(p.encode()) == p


pcr_choice = st.dictionaries(st.sampled_from(PCRS), st.sampled_from([b"a", b"b"]), max_size=3)


@settings(max_examples=80, deadline=None)
@given(pcr_choice, st.one_of(st.none(), st.sampled_from([0, 40])), pcr_choice, st.sampled_from([0, 40, 41]))
def test_gate_soundness(required, req_loc, actual, locality):
    bank = replay([(i, hash_bytes(v)) for i, v in sorted(actual.items())])
    policy = UsagePolicy.build({i: replay([(i, hash_bytes(v))])[i] for i, v in required.items()}, req_loc)
    tpm = Tpm(seed=15)
    blob, _ = tpm.create_key("k", policy)
    allowed = evaluate_policy(policy, bank, locality) is None
    try:
        tpm.signing_session(sign_cmd(locality=locality), bank, blob=blob)
        signed = True
    except PolicyUnsatisfied:
        signed = False
    assert signed == allowed


def test_sentinel_secret_never_serialized():
    sentinel = b"\xa5SENTINEL-SECRET-PATTERN-0123456"
    assert len(sentinel) == 32
    tpm = Tpm(seed=16, secret_source=lambda: sentinel)
    bank = booted_bank()
    inner, vk = tpm.create_key("ask", UsagePolicy.from_bank(bank))
    outer = tpm.double_wrap(inner, UsagePolicy())
    sig = tpm.signing_session(sign_cmd(), bank, blob=inner)
    q = tpm.quote(bank, PCRS, hash_bytes(b"n"), blob=inner)
    outputs = [inner.to_bytes(), outer.to_bytes(), vk, sig.value, q.to_bytes(), repr(inner).encode()]
    for out in outputs:
        assert sentinel not in out
