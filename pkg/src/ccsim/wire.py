"""Length-prefixed JSON protocol between the host shim and guest-side services.

Frame: 4-byte big-endian body length, then a UTF-8 JSON body of at most
1 MiB.  Requests look like::

    {"seq": 7, "kind": "request", "action": "mount_device", "payload": {...}}

and every request gets exactly one response echoing its ``seq``::

    {"seq": 7, "kind": "response", "action": "mount_device",
     "allowed": false, "deny_reason": "device hash not in policy", "payload": {}}

``seq`` starts at 1 and must strictly increase on a connection.  Anything that
cannot be understood gets a response with ``seq`` 0 and a ``deny_reason``
starting with ``"framing:"`` or ``"protocol:"``.  Endpoints never raise on
input.
"""

from __future__ import annotations

from collections import deque
import json
import logging
import socket
import socketserver
import struct
import threading
from typing import Any, Callable

from .attestation import (
    AttestationRejected,
    AttestationReport,
    AttestationService,
    AttestationToken,
    CertificateChain,
    KeyBroker,
    KeyReleaseDenied,
    KeyReleasePolicy,
)
from .engine import SCHEMAS, EnforcementRequest
from .guest import GuestAgent, GuestFault

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 20
_LEN = struct.Struct(">I")
MAX_SEQ = 2**64 - 1


class FramingError(Exception):
    pass


def dumps(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_frame(obj: Any) -> bytes:
    return frame_body(dumps(obj))


def frame_body(body: bytes) -> bytes:
    if len(body) > MAX_FRAME:
        raise FramingError(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(len(body)) + body


class FrameDecoder:
    """Incremental decoder. ``feed`` yields complete bodies or a FramingError.

    An oversize length header is fatal: the stream cannot be resynchronised, so
    the decoder reports it once and then stays closed.
    """

    def __init__(self):
        self._buf = bytearray()
        self.closed = False

    def feed(self, data: bytes) -> list[bytes | FramingError]:
        if self.closed:
            return []
        self._buf += data
        out: list[bytes | FramingError] = []
        while len(self._buf) >= 4:
            (n,) = _LEN.unpack_from(self._buf, 0)
            if n > MAX_FRAME:
                self.closed = True
                self._buf.clear()
                out.append(FramingError(f"frame length {n} exceeds {MAX_FRAME}"))
                break
            if len(self._buf) < 4 + n:
                break
            out.append(bytes(self._buf[4:4 + n]))
            del self._buf[:4 + n]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def response(seq: int, action: str, allowed: bool, reason: str | None = None, payload=None) -> dict:
    return {
        "seq": seq, "kind": "response", "action": action, "allowed": allowed,
        "deny_reason": None if allowed else reason, "payload": payload or {},
    }


def error_response(reason: str) -> dict:
    return response(0, "", False, reason)


class Connection:
    """Per-connection protocol state."""

    def __init__(self):
        self.last_seq = 0
        self.decoder = FrameDecoder()


class Endpoint:
    """Dispatches framed requests to ``handlers``; subclasses fill the table."""

    def __init__(self):
        self.handlers: dict[str, Callable[[dict], tuple[bool, str | None, dict]]] = {}
        self.lock = threading.Lock()

    def handle_body(self, body: bytes, conn: Connection) -> dict:
        try:
            msg = json.loads(body.decode("utf-8"))
        except ValueError as exc:  # bad UTF-8, bad JSON, oversized integer literals
            return error_response(f"framing: undecodable body ({type(exc).__name__})")
        except RecursionError:
            return error_response("framing: nesting too deep")
        if not isinstance(msg, dict) or set(msg) != {"seq", "kind", "action", "payload"}:
            return error_response("protocol: malformed message")
        seq, kind, action, payload = msg["seq"], msg["kind"], msg["action"], msg["payload"]
        if isinstance(seq, bool) or not isinstance(seq, int) or not 1 <= seq <= MAX_SEQ:
            return error_response("protocol: bad seq")
        if kind != "request" or not isinstance(action, str) or not isinstance(payload, dict):
            return response(seq, action if isinstance(action, str) else "", False, "protocol: malformed message")
        if seq <= conn.last_seq:
            return response(seq, action, False, "protocol: non-monotonic seq")
        conn.last_seq = seq
        handler = self.handlers.get(action)
        if handler is None:
            return response(seq, action, False, "unknown action")
        with self.lock:
            try:
                allowed, reason, data = handler(payload)
            except GuestFault as fault:
                return response(seq, action, False, f"fault: {fault.code}")
            except Exception as exc:  # totality: a handler bug must not kill the endpoint
                log.exception("handler %s failed", action)
                return response(seq, action, False, f"internal: {type(exc).__name__}")
        return response(seq, action, allowed, reason, data)

    def handle_bytes(self, data: bytes, conn: Connection) -> list[dict]:
        """Feed raw stream bytes; return the responses they produce."""
        out = []
        for item in conn.decoder.feed(data):
            if isinstance(item, FramingError):
                out.append(error_response(f"framing: {item}"))
            else:
                out.append(self.handle_body(item, conn))
        return out


class GuestEndpoint(Endpoint):
    """Guest-agent side of the bridge.

    With ``diagnostics`` enabled (test harness only) it also answers
    ``sim.snapshot``, ``sim.safety`` and ``sim.reset`` so a remote scenario
    runner can check atomicity and safety.  These bypass the policy and must
    not be enabled for anything but simulation.
    """

    def __init__(self, agent: GuestAgent, diagnostics: bool = False):
        super().__init__()
        self.agent = agent
        for action in SCHEMAS:
            self.handlers[action] = self._enforced(action)
        if diagnostics:
            self.handlers["sim.snapshot"] = self._snapshot
            self.handlers["sim.safety"] = self._safety
            self.handlers["sim.reset"] = self._reset

    def _enforced(self, action: str):
        def handler(payload: dict):
            r = self.agent.handle(EnforcementRequest(action, payload))
            return r.allowed, r.deny_reason, dict(r.data)
        return handler

    def _snapshot(self, payload):
        return True, None, {"snapshot": self.agent.snapshot().decode()}

    def _safety(self, payload):
        from .oracle import safety_violations

        bad = safety_violations(self.agent.state)
        return True, None, {"safe": not bad, "violations": bad}

    def _reset(self, payload):
        from .scenario import build_disks

        policy_doc = payload.get("policy")
        try:
            agent = GuestAgent.boot(dumps(policy_doc), None, disks=build_disks(payload.get("disks")))
        except (ValueError, TypeError) as exc:
            return False, f"reset: {exc}", {}
        self.agent = agent
        return True, None, {}


class AttestationEndpoint(Endpoint):
    """Verifier and key broker over the same framing: verify, register_key, release_key."""

    def __init__(self, service: AttestationService, broker: KeyBroker):
        super().__init__()
        self.service = service
        self.broker = broker
        self.handlers.update(verify=self._verify, register_key=self._register, release_key=self._release)

    def _verify(self, p):
        try:
            report = AttestationReport.from_bytes(bytes.fromhex(p["report"]))
            chain = CertificateChain.from_bytes(bytes.fromhex(p["chain"]))
            digest = bytes.fromhex(p["policy_digest"])
            claim = bytes.fromhex(p["runtime_claim"])
        except (KeyError, TypeError, ValueError):
            return False, "malformed", {}
        try:
            token = self.service.attest(report, chain, digest, claim)
        except AttestationRejected as exc:
            return False, exc.reason, {}
        except ValueError:
            return False, "malformed", {}
        return True, None, {"token": token.to_dict()}

    def _register(self, p):
        try:
            policy = KeyReleasePolicy(
                bytes.fromhex(p["expected_host_data"]),
                frozenset(bytes.fromhex(m) for m in p["allowed_measurements"]),
            )
            self.broker.register_key(str(p["key_id"]), bytes.fromhex(p["key"]), policy)
        except (KeyError, TypeError, ValueError):
            return False, "malformed", {}
        return True, None, {}

    def _release(self, p):
        try:
            token = AttestationToken.from_dict(p["token"])
            wrapping = bytes.fromhex(p["wrapping_key"])
            key_id = str(p["key_id"])
        except (KeyError, TypeError, ValueError, AttributeError):
            return False, "malformed", {}
        try:
            wrapped = self.broker.release_key(key_id, token, wrapping)
        except KeyReleaseDenied as exc:
            return False, exc.reason, {}
        return True, None, {"wrapped_key": wrapped.hex()}


# -- transports ------------------------------------------------------------------


class TransportError(Exception):
    pass


class InProcessTransport:
    """Talks to an endpoint in the same process, through the real framing."""

    def __init__(self, endpoint: Endpoint):
        self.endpoint = endpoint
        self.conn = Connection()
        self.seq = 0

    def next_seq(self) -> int:
        self.seq += 1
        return self.seq

    def send_raw(self, data: bytes) -> list[dict]:
        return self.endpoint.handle_bytes(data, self.conn)

    def request(self, action: str, payload: dict) -> dict:
        msg = {"seq": self.next_seq(), "kind": "request", "action": action, "payload": payload}
        replies = self.send_raw(encode_frame(msg))
        if len(replies) != 1:
            raise TransportError(f"expected one response, got {len(replies)}")
        return replies[0]

    def close(self) -> None:
        pass


class TcpTransport:
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"connect {host}:{port}: {exc}") from None
        self.decoder = FrameDecoder()
        self._pending: deque = deque()
        self.seq = 0

    def next_seq(self) -> int:
        self.seq += 1
        return self.seq

    def _recv_one(self) -> dict:
        while not self._pending:
            try:
                chunk = self.sock.recv(65536)
            except OSError as exc:
                raise TransportError(str(exc)) from None
            if not chunk:
                raise TransportError("connection closed")
            self._pending.extend(self.decoder.feed(chunk))
        item = self._pending.popleft()
        if isinstance(item, FramingError):
            raise TransportError(f"bad reply framing: {item}")
        return json.loads(item)

    def send_raw(self, data: bytes) -> list[dict]:
        """Send raw bytes and collect replies for the complete frames they contain."""
        expected = len(FrameDecoder().feed(data))
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise TransportError(str(exc)) from None
        return [self._recv_one() for _ in range(expected)]

    def request(self, action: str, payload: dict) -> dict:
        msg = {"seq": self.next_seq(), "kind": "request", "action": action, "payload": payload}
        return self.send_raw(encode_frame(msg))[0]

    def close(self) -> None:
        self.sock.close()


# -- server ------------------------------------------------------------------------


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        endpoint: Endpoint = self.server.endpoint
        conn = Connection()
        while not conn.decoder.closed:
            try:
                data = self.request.recv(65536)
            except OSError:
                return
            if not data:
                return
            for reply in endpoint.handle_bytes(data, conn):
                try:
                    self.request.sendall(encode_frame(reply))
                except OSError:
                    return


class FramedServer(socketserver.ThreadingTCPServer):
    """Accepts concurrent connections; the endpoint lock serializes all requests."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, endpoint: Endpoint, host: str = "127.0.0.1", port: int = 0):
        self.endpoint = endpoint
        super().__init__((host, port), _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)
