import socket
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layered_attest import netd
from layered_attest import platform_sim as ps
from layered_attest.deployment import provision
from layered_attest.digest_core import Digest, hash_bytes


@pytest.fixture(scope="module")
def dep():
    d = provision(seed=21)
    d.boot()
    return d


@pytest.fixture
def server(dep):
    srv = netd.serve(("127.0.0.1", 0), dep, background=True)
    yield srv
    srv.shutdown()
    srv.server_close()


def addr(srv):
    return srv.server_address[:2]


# -- framing ----------------------------------------------------------------

messages = st.one_of(
    st.builds(netd.request, st.binary(min_size=32, max_size=32).map(Digest), st.text(max_size=40)),
    st.builds(netd.error, st.text(max_size=200)),
    st.builds(lambda b: netd.WireMessage("response", bundle=b), st.binary(max_size=2000)),
)


@given(messages)
def test_frame_roundtrip(msg):
    assert netd.decode_frame(netd.encode_frame(msg)) == msg


@settings(max_examples=300)
@given(st.binary(max_size=4096))
def test_arbitrary_bytes_never_crash_decoder(data):
    try:
        netd.decode_frame(data)
    except netd.MalformedFrame:
        pass


@settings(max_examples=200)
@given(st.binary(max_size=2048))
def test_arbitrary_bodies_with_valid_length(body):
    try:
        netd.decode_frame(struct.pack(">I", len(body)) + body)
    except netd.MalformedFrame:
        pass


@pytest.mark.parametrize(
    "body",
    [
        b"[]",
        b'{"kind":"hello"}',
        b'{"kind":"request","nonce":"00"}',
        b'{"kind":"request","protocol_id":"cds"}',
        b'{"kind":"response"}',
        b'{"kind":"error"}',
        b'{"kind":"error","reason":3}',
        b'{"kind":"error","reason":"x","extra":"y"}',
        b'{"kind":"response","bundle_b64":"***"}',
        b"\xff\xfe",
    ],
)
def test_malformed_bodies(body):
    with pytest.raises(netd.MalformedFrame):
        netd.decode_frame(struct.pack(">I", len(body)) + body)


def test_length_limits():
    with pytest.raises(netd.MalformedFrame):
        netd.decode_frame(struct.pack(">I", netd.MAX_FRAME + 1))
    with pytest.raises(netd.MalformedFrame):
        netd.decode_frame(b"\x00\x00")
    good = netd.encode_frame(netd.error("x"))
    with pytest.raises(netd.MalformedFrame):
        netd.decode_frame(good + b"!")
    with pytest.raises(netd.MalformedFrame):
        netd.encode_frame(netd.error("x" * (netd.MAX_FRAME + 1)))


def test_frame_just_under_limit_decodes():
    payload = "y" * (netd.MAX_FRAME - len(b'{"kind":"error","reason":""}'))
    frame = netd.encode_frame(netd.error(payload))
    assert len(frame) == 4 + netd.MAX_FRAME
    assert netd.decode_frame(frame).reason == payload


# -- end to end ---------------------------------------------------------------


def test_request_passes(dep, server):
    verdict = netd.request_attestation(addr(server), "cds", dep.store, dep.protocol, timeout=5)
    assert verdict.passed


def test_each_request_uses_fresh_nonce(dep, server):
    source = netd.NonceSource()
    for _ in range(3):
        assert netd.request_attestation(addr(server), "cds", dep.store, dep.protocol, 5, source).passed
    assert len(source) == 3


def test_unknown_protocol_refused(dep, server):
    with pytest.raises(netd.AttestationRefused) as err:
        netd.request_attestation(addr(server), "nope", dep.store, dep.protocol, timeout=5)
    assert err.value.reason == "unknown protocol"


def test_replaying_attester_fails_nonce(dep):
    srv = netd.serve(("127.0.0.1", 0), dep, replay=True, background=True)
    try:
        first = netd.request_attestation(addr(srv), "cds", dep.store, dep.protocol, timeout=5)
        second = netd.request_attestation(addr(srv), "cds", dep.store, dep.protocol, timeout=5)
    finally:
        srv.shutdown()
        srv.server_close()
    assert first.passed
    assert not second.passed and not second.nonce_ok and second.signature_ok


def test_corrupted_attester_fails_lkim():
    d = provision(seed=22)
    d.boot()
    ps.adversary_act(d.platform, ps.Action("corrupt_kernel"))
    srv = netd.serve(("127.0.0.1", 0), d, background=True)
    try:
        v = netd.request_attestation(addr(srv), "cds", d.store, d.protocol, timeout=5)
    finally:
        srv.shutdown()
        srv.server_close()
    assert not v.passed and v.target("lkim", "kerIma") != "passed"


def test_withheld_key_is_refused():
    d = provision(seed=23)
    inputs = ps.golden_boot_inputs()
    inputs["kernel"] += b"\x00"
    d.boot(inputs)
    srv = netd.serve(("127.0.0.1", 0), d, background=True)
    try:
        with pytest.raises(netd.AttestationRefused) as err:
            netd.request_attestation(addr(srv), "cds", d.store, d.protocol, timeout=5)
    finally:
        srv.shutdown()
        srv.server_close()
    assert "pcr_mismatch" in err.value.reason


def test_server_answers_garbage_with_error(server):
    with socket.create_connection(addr(server), timeout=5) as s:
        s.sendall(struct.pack(">I", 5) + b"hello")
        reply = netd.read_frame(s)
    assert reply.kind == "error" and reply.reason.startswith("malformed frame")


def test_connection_failed():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(netd.ConnectionFailed):
        netd.exchange(("127.0.0.1", port), netd.request(hash_bytes(b"n"), "cds"), timeout=2)


def test_timeout():
    silent = socket.socket()
    silent.bind(("127.0.0.1", 0))
    silent.listen(1)
    try:
        with pytest.raises(netd.Timeout):
            netd.exchange(silent.getsockname(), netd.request(hash_bytes(b"n"), "cds"), timeout=0.3)
    finally:
        silent.close()


def test_garbage_response_is_malformed():
    srv_sock = socket.socket()
    srv_sock.bind(("127.0.0.1", 0))
    srv_sock.listen(1)
    import threading

    def answer():
        conn, _ = srv_sock.accept()
        with conn:
            netd._recv_exact(conn, 4)
            conn.sendall(struct.pack(">I", 3) + b"abc")

    t = threading.Thread(target=answer)
    t.start()
    try:
        with pytest.raises(netd.MalformedResponse):
            netd.exchange(srv_sock.getsockname(), netd.request(hash_bytes(b"n"), "cds"), timeout=2)
    finally:
        t.join()
        srv_sock.close()


def test_parse_address():
    assert netd.parse_address("127.0.0.1:80") == ("127.0.0.1", 80)
    assert netd.parse_address(":9") == ("127.0.0.1", 9)
    with pytest.raises(ValueError):
        netd.parse_address("localhost")


def test_nonce_source_never_repeats():
    source = netd.NonceSource()
    seen = {source.fresh() for _ in range(2000)}
    assert len(seen) == 2000 == len(source)
