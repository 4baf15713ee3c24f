import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layered_attest import copland_proto as cp
from layered_attest import platform_sim as ps
from layered_attest.appraisal import appraise
from layered_attest.deployment import provision
from layered_attest.digest_core import hash_bytes

MEASURE_LEAVES = [
    cp.Asp("lkim", "kerIma"),
    cp.Asp("sepol", "selinux_policy"),
    cp.Asp("cfg", "rewrite_cfg"),
    cp.Asp("cfg", "filter_cfg"),
    cp.Asp("bin", "intake"),
    cp.Asp("bin", "rewrite"),
    cp.Asp("bin", "filter"),
    cp.Asp("bin", "export"),
]


@st.composite
def terms(draw, leaves=None):
    """Terms over distinct measurement leaves, optionally led by nonce and closed by sign."""
    leaves = leaves or draw(st.permutations(MEASURE_LEAVES).map(lambda p: p[: draw(st.integers(1, 8))]))

    def build(items):
        if len(items) == 1:
            return items[0]
        cut = draw(st.integers(1, len(items) - 1))
        ctor = draw(st.sampled_from([cp.Seq, cp.Par, cp.Par]))
        return ctor(build(items[:cut]), build(items[cut:]))

    body = build(list(leaves))
    if draw(st.booleans()):
        body = cp.Seq(cp.Nonce(), body)
    if draw(st.booleans()):
        body = cp.Seq(body, cp.Sign())
    return body


def seq_pairs(term):
    """Reference ordering: Seq orders everything on its left before its right."""
    if isinstance(term, (cp.Seq, cp.Par)):
        left, lp = seq_pairs(term.left)
        right, rp = seq_pairs(term.right)
        pairs = lp | rp
        if isinstance(term, cp.Seq):
            pairs |= {(a, b) for a in left for b in right}
        return left + right, pairs
    return [term], set()


def test_smallest_sequence():
    assert cp.parse("asp lkim kerIma -> sign") == cp.Seq(cp.Asp("lkim", "kerIma"), cp.Sign())


def test_arrow_is_right_associative_and_looser_than_tilde():
    t = cp.parse("asp a b -> asp c d ~ asp e f -> sign")
    assert t == cp.Seq(cp.Asp("a", "b"), cp.Seq(cp.Par(cp.Asp("c", "d"), cp.Asp("e", "f")), cp.Sign()))


def test_canonical_protocol_roundtrips():
    t = cp.parse(cp.CANONICAL_CDS_PROTOCOL)
    assert cp.parse(cp.render(t)) == t
    fixture = (ps.fixture_dir() / "protocols" / "cds.copland").read_text()
    assert cp.parse(fixture) == t


@pytest.mark.parametrize("text", ["sign -> asp a b", "sign ~ asp a b", "asp a b -> sign -> sign"])
def test_misplaced_sign(text):
    with pytest.raises(cp.MisplacedSign):
        cp.parse(text)


def test_misplaced_nonce():
    with pytest.raises(cp.MisplacedNonce):
        cp.parse("asp a b -> nonce")


@pytest.mark.parametrize(
    "text,line,col",
    [("asp a", 1, 6), ("asp a b ->\n  ->", 2, 3), ("asp a b $", 1, 9), ("(asp a b", 1, 9), ("asp a b )", 1, 9)],
)
def test_syntax_error_positions(text, line, col):
    with pytest.raises(cp.ProtocolSyntaxError) as err:
        cp.parse(text)
    assert (err.value.line, err.value.col) == (line, col)


def test_comments_are_ignored():
    assert cp.parse("# head\nasp a b # tail\n-> sign") == cp.parse("asp a b -> sign")


def test_par_has_two_extensions():
    g = cp.events(cp.parse("asp a b ~ asp c d"))
    assert g.order == frozenset()
    assert len(list(cp.linear_extensions(g))) == 2
    g = cp.events(cp.parse("asp a b -> asp c d"))
    assert g.order == {(0, 1)}


def test_canonical_order_kernel_first_sign_last():
    g = cp.events(cp.parse(cp.CANONICAL_CDS_PROTOCOL))
    by_label = {e.label(): e.id for e in g.events}
    lkim, sign, nonce = by_label["lkim(kerIma)"], by_label["sign"], by_label["nonce"]
    for e in g.events:
        if e.kind == "measure" and e.asp in ("cfg", "bin"):
            assert (lkim, e.id) in g.order
        if e.id != sign:
            assert (e.id, sign) in g.order
        if e.id != nonce:
            assert (nonce, e.id) in g.order


@given(terms())
def test_render_parse_fixpoint(term):
    assert cp.parse(cp.render(term)) == term


@given(terms())
def test_event_order_is_closed_and_matches_reference(term):
    g = cp.events(term)
    order = g.order
    assert all(a != b for a, b in order)
    for a, b in order:
        for c, d in order:
            if b == c:
                assert (a, d) in order
    leaves, pairs = seq_pairs(term)
    ids = {id(leaf): k for k, leaf in enumerate(leaves)}
    want = {(ids[id(a)], ids[id(b)]) for a, b in pairs}
    nonce_ids = [k for k, leaf in enumerate(leaves) if isinstance(leaf, cp.Nonce)]
    want |= {(n, k) for n in nonce_ids for k in range(len(leaves)) if k != n}
    assert order == want


@pytest.fixture(scope="module")
def golden():
    dep = provision(seed=3)
    dep.boot()
    return dep


@settings(max_examples=30, deadline=None)
@given(terms(), st.integers(0, 2**32))
def test_execution_order_is_a_linear_extension(golden, term, seed):
    calls = []

    def logged(service):
        def measure(state, pid, target):
            calls.append((service.path, target))
            return service.measure(state, pid, target)

        return cp.AspService(service.path, measure)

    table = {name: logged(s) for name, s in cp.DEFAULT_ASPS.items()}
    trace = cp.ExecutionTrace()
    bundle = cp.execute(term, golden.platform, golden.tpm, hash_bytes(b"n"), asp_table=table,
                        signer=golden.signer, seed=seed, trace=trace)
    g = cp.events(term)
    pos = {eid: k for k, eid in enumerate(trace.order)}
    assert sorted(pos) == [e.id for e in g.events]
    assert all(pos[a] < pos[b] for a, b in g.order)
    by_id = {e.id: e for e in g.events}
    expected = [(cp.DEFAULT_ASPS[by_id[i].asp].path, by_id[i].target) for i in trace.order if by_id[i].kind == "measure"]
    assert calls == expected
    assert cp.shape_of(bundle.root) == term


def test_same_seed_same_bundle(golden):
    term = cp.parse(cp.CANONICAL_CDS_PROTOCOL)
    n = hash_bytes(b"nonce")
    a = cp.execute(term, golden.platform, golden.tpm, n, signer=golden.signer, seed=9)
    b = cp.execute(term, golden.platform, golden.tpm, n, signer=golden.signer, seed=9)
    assert a.to_bytes() == b.to_bytes()


def test_bundle_roundtrip_and_golden_appraisal(golden):
    nonce = golden.fresh_nonce()
    bundle = golden.attest(nonce)
    assert cp.EvidenceBundle.from_bytes(bundle.to_bytes()) == bundle
    assert bundle.to_bytes().startswith(b"AEB1")
    assert appraise(bundle, golden.store.with_nonce(nonce), golden.protocol).passed


def test_corrupted_kernel_changes_lkim_digest():
    dep = provision(seed=4)
    dep.boot()
    ps.adversary_act(dep.platform, ps.Action("corrupt_kernel"))
    bundle = dep.attest(dep.fresh_nonce())
    lkim = [m for m in bundle.measurements() if m.asp == "lkim"][0]
    assert lkim.digest != dep.store.values[("lkim", "kerIma")]


def test_non_golden_boot_denies_signing():
    dep = provision(seed=5)
    inputs = ps.golden_boot_inputs()
    inputs["argv"] += b" single"
    dep.boot(inputs)
    with pytest.raises(cp.SigningDenied) as err:
        dep.attest(dep.fresh_nonce())
    assert err.value.reason == "pcr_mismatch"
    assert err.value.bundle is not None and err.value.bundle.signed_node().signature == b""


def test_execute_requires_post_release():
    dep = provision(seed=6)
    with pytest.raises(ps.PhaseError):
        dep.attest(dep.fresh_nonce())


def test_unknown_asp_is_unavailable(golden):
    with pytest.raises(cp.AspUnavailable):
        cp.execute(cp.parse("asp nosuch x"), golden.platform, golden.tpm, hash_bytes(b"n"))
    with pytest.raises(cp.AspUnavailable):
        cp.execute(cp.parse("asp bin nosuch"), golden.platform, golden.tpm, hash_bytes(b"n"))


@pytest.mark.parametrize("data", [b"", b"AEB1", b"XXXX" + bytes(40), b"AEB1\x00\x00\x00\x05hello"])
def test_bundle_decode_rejects_garbage(data):
    with pytest.raises(ValueError):
        cp.EvidenceBundle.from_bytes(data)
