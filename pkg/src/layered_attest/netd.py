"""Challenge/response over TCP: an attester daemon and the appraiser client.

Frames are a 4-byte big-endian length followed by one UTF-8 JSON object.
Each connection carries exactly one request and one reply.
"""

from __future__ import annotations

import base64
import binascii
import copy
import json
import logging
import secrets
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from typing import Mapping, Optional

from . import copland_proto as cp
from .appraisal import GoldenStore, Verdict, appraise
from .deployment import Deployment
from .digest_core import Digest

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 20
DEFAULT_TIMEOUT = 10.0
KINDS = ("request", "response", "error")


class NetError(Exception):
    pass


class MalformedFrame(NetError):
    pass


class ConnectionFailed(NetError):
    pass


class Timeout(NetError):
    pass


class MalformedResponse(NetError):
    pass


class AttestationRefused(NetError):
    """The attester answered with an error message."""

    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class WireMessage:
    kind: str
    nonce: Optional[Digest] = None
    protocol_id: Optional[str] = None
    bundle: Optional[bytes] = None
    reason: Optional[str] = None

    def to_json(self) -> dict:
        body: dict = {"kind": self.kind}
        if self.nonce is not None:
            body["nonce"] = self.nonce.hex()
        if self.protocol_id is not None:
            body["protocol_id"] = self.protocol_id
        if self.bundle is not None:
            body["bundle_b64"] = base64.b64encode(self.bundle).decode("ascii")
        if self.reason is not None:
            body["reason"] = self.reason
        return body


def request(nonce: Digest, protocol_id: str) -> WireMessage:
    return WireMessage("request", nonce=nonce, protocol_id=protocol_id)


def error(reason: str) -> WireMessage:
    return WireMessage("error", reason=reason)


def encode_frame(msg: WireMessage) -> bytes:
    body = json.dumps(msg.to_json(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise MalformedFrame("frame too large")
    return struct.pack(">I", len(body)) + body


def decode_body(body: bytes) -> WireMessage:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFrame(f"body is not JSON: {exc}") from None
    if not isinstance(obj, dict) or obj.get("kind") not in KINDS:
        raise MalformedFrame("body must be an object with a known kind")
    allowed = {"kind", "nonce", "protocol_id", "bundle_b64", "reason"}
    if set(obj) - allowed:
        raise MalformedFrame(f"unexpected fields {sorted(set(obj) - allowed)}")
    for key in allowed - {"kind"}:
        if key in obj and not isinstance(obj[key], str):
            raise MalformedFrame(f"{key} must be a string")
    kind = obj["kind"]
    try:
        nonce = Digest.parse(obj["nonce"]) if "nonce" in obj else None
        bundle = base64.b64decode(obj["bundle_b64"], validate=True) if "bundle_b64" in obj else None
    except (ValueError, binascii.Error) as exc:
        raise MalformedFrame(str(exc)) from None
    msg = WireMessage(kind, nonce, obj.get("protocol_id"), bundle, obj.get("reason"))
    if kind == "request" and (nonce is None or msg.protocol_id is None):
        raise MalformedFrame("request needs nonce and protocol_id")
    if kind == "response" and bundle is None:
        raise MalformedFrame("response needs bundle_b64")
    if kind == "error" and msg.reason is None:
        raise MalformedFrame("error needs reason")
    return msg


def decode_frame(data: bytes) -> WireMessage:
    """Parse a complete frame; trailing or missing bytes are an error."""
    if len(data) < 4:
        raise MalformedFrame("short length prefix")
    (n,) = struct.unpack(">I", data[:4])
    if n > MAX_FRAME:
        raise MalformedFrame("frame too large")
    if len(data) != 4 + n:
        raise MalformedFrame("length prefix does not match frame size")
    return decode_body(data[4:])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 65536))
        if not chunk:
            raise MalformedFrame("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> WireMessage:
    (n,) = struct.unpack(">I", _recv_exact(sock, 4))
    if n > MAX_FRAME:
        raise MalformedFrame("frame too large")
    return decode_body(_recv_exact(sock, n))


# ---------------------------------------------------------------------------
# attester
# ---------------------------------------------------------------------------


class Attester:
    """Answers requests against a deployment. ``replay`` makes it resend the
    first bundle it ever produced, which is how a replaying attacker looks."""

    def __init__(self, deployment: Deployment, protocols: Mapping[str, cp.Term], replay: bool = False) -> None:
        self.deployment = deployment
        self.protocols = dict(protocols)
        self.replay = replay
        self._cached: Optional[bytes] = None
        self._lock = threading.Lock()

    def handle(self, msg: WireMessage) -> WireMessage:
        if msg.kind != "request":
            return error("expected a request")
        term = self.protocols.get(msg.protocol_id or "")
        if term is None:
            return error("unknown protocol")
        with self._lock:
            if self.replay and self._cached is not None:
                return WireMessage("response", bundle=self._cached)
            # each request measures its own copy so nothing carries over
            platform = copy.deepcopy(self.deployment.platform)
        seed = int.from_bytes(msg.nonce.value[:8], "big") if msg.nonce else 0
        try:
            bundle = cp.execute(
                term, platform, self.deployment.tpm, msg.nonce, signer=self.deployment.signer,
                seed=seed, quote_pcrs=self.deployment.quote_pcrs,
            )
        except cp.SigningDenied as exc:
            return error(f"signing denied: {exc.reason}")
        except (cp.ProtocolError, ValueError) as exc:
            return error(f"attestation failed: {exc}")
        data = bundle.to_bytes()
        with self._lock:
            if self._cached is None:
                self._cached = data
        return WireMessage("response", bundle=data)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        sock: socket.socket = self.request
        sock.settimeout(DEFAULT_TIMEOUT)
        try:
            msg = read_frame(sock)
            reply = self.server.attester.handle(msg)  # type: ignore[attr-defined]
        except MalformedFrame as exc:
            reply = error(f"malformed frame: {exc}")
        except (socket.timeout, struct.error):
            reply = error("malformed frame: incomplete")
        except Exception as exc:  # keep the daemon alive
            log.exception("request failed")
            reply = error(f"internal error: {type(exc).__name__}")
        try:
            sock.sendall(encode_frame(reply))
        except OSError:
            pass


class AttestServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], attester: Attester) -> None:
        super().__init__(address, _Handler)
        self.attester = attester


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def serve(
    listen: str | tuple[str, int],
    deployment: Deployment,
    protocols: Mapping[str, cp.Term] | None = None,
    replay: bool = False,
    background: bool = False,
) -> AttestServer:
    """Start the daemon. With ``background`` the server runs on a thread and is
    returned; otherwise this blocks until shut down."""
    address = parse_address(listen) if isinstance(listen, str) else listen
    protocols = protocols if protocols is not None else {"cds": deployment.protocol}
    server = AttestServer(address, Attester(deployment, protocols, replay))
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
        return server
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return server


# ---------------------------------------------------------------------------
# appraiser client
# ---------------------------------------------------------------------------


class NonceSource:
    """Fresh random nonces, never repeated within this process."""

    def __init__(self) -> None:
        self._issued: set[bytes] = set()
        self._lock = threading.Lock()

    def fresh(self) -> Digest:
        with self._lock:
            while True:
                value = secrets.token_bytes(32)
                if value not in self._issued:
                    self._issued.add(value)
                    return Digest(value)

    def __len__(self) -> int:
        return len(self._issued)


NONCES = NonceSource()


def exchange(address: str | tuple[str, int], msg: WireMessage, timeout: float = DEFAULT_TIMEOUT) -> WireMessage:
    addr = parse_address(address) if isinstance(address, str) else address
    try:
        with socket.create_connection(addr, timeout=timeout) as sock:
            sock.settimeout(timeout)
            sock.sendall(encode_frame(msg))
            return read_frame(sock)
    except socket.timeout as exc:
        raise Timeout(f"no answer from {addr[0]}:{addr[1]} within {timeout}s") from exc
    except MalformedFrame as exc:
        raise MalformedResponse(str(exc)) from exc
    except OSError as exc:
        raise ConnectionFailed(f"{addr[0]}:{addr[1]}: {exc}") from exc


def request_attestation(
    address: str | tuple[str, int],
    protocol_id: str,
    store: GoldenStore,
    expected_term: cp.Term,
    timeout: float = DEFAULT_TIMEOUT,
    nonces: NonceSource = NONCES,
) -> Verdict:
    nonce = nonces.fresh()
    reply = exchange(address, request(nonce, protocol_id), timeout)
    if reply.kind == "error":
        raise AttestationRefused(reply.reason or "")
    if reply.kind != "response" or reply.bundle is None:
        raise MalformedResponse(f"unexpected {reply.kind} message")
    try:
        bundle = cp.EvidenceBundle.from_bytes(reply.bundle)
    except ValueError as exc:
        raise MalformedResponse(f"bundle does not decode: {exc}") from exc
    return appraise(bundle, store.with_nonce(nonce), expected_term)
