import json
import random
import struct
import threading

import pytest

from ccsim import attestation as att
from ccsim.attestation import AttestationService, KeyBroker, MockPsp, VendorAuthority
from ccsim.guest import GuestAgent
from ccsim.wire import (
    MAX_FRAME,
    AttestationEndpoint,
    Connection,
    FrameDecoder,
    FramedServer,
    FramingError,
    GuestEndpoint,
    InProcessTransport,
    TcpTransport,
    encode_frame,
    frame_body,
    parse_endpoint,
)

from conftest import LAYER_A


def frame(obj):
    return encode_frame(obj)


def req(seq, action="get_properties", payload=None):
    return {"seq": seq, "kind": "request", "action": action, "payload": payload or {}}


@pytest.fixture
def endpoint(web_policy):
    return GuestEndpoint(GuestAgent(web_policy), diagnostics=True)


def test_decoder_handles_split_and_joined_frames():
    dec = FrameDecoder()
    data = frame({"a": 1}) + frame({"b": 2})
    out = []
    for i in range(len(data)):
        out += dec.feed(data[i:i + 1])
    assert [json.loads(b) for b in out] == [{"a": 1}, {"b": 2}]
    assert dec.pending == 0


def test_oversize_frame_closes_decoder():
    dec = FrameDecoder()
    out = dec.feed(struct.pack(">I", MAX_FRAME + 1) + b"x" * 10)
    assert len(out) == 1 and isinstance(out[0], FramingError)
    assert dec.closed and dec.feed(frame({})) == []
    with pytest.raises(FramingError):
        frame_body(b"x" * (MAX_FRAME + 1))


def test_request_response_echoes_seq(endpoint):
    t = InProcessTransport(endpoint)
    r = t.request("mount_device", {"device_hash": LAYER_A, "target": "/l/a"})
    assert r == {"seq": 1, "kind": "response", "action": "mount_device", "allowed": True,
                 "deny_reason": None, "payload": {}}
    r = t.request("dump_stacks", {})
    assert r["seq"] == 2 and not r["allowed"] and r["deny_reason"] == "disabled by policy flag"


def test_seq_must_strictly_increase(endpoint):
    conn = Connection()
    assert endpoint.handle_bytes(frame(req(5)), conn)[0]["seq"] == 5
    for seq in (5, 4):
        r = endpoint.handle_bytes(frame(req(seq)), conn)[0]
        assert r["deny_reason"] == "protocol: non-monotonic seq"
    assert endpoint.handle_bytes(frame(req(6, "sim.snapshot")), conn)[0]["allowed"]


@pytest.mark.parametrize("body, prefix", [
    (b"\xff\xfe", "framing:"),
    (b"{not json", "framing:"),
    (b"[" * 100000, "framing:"),
    (b"1" * 5000, "framing:"),
    (b"[]", "protocol:"),
    (json.dumps({"seq": 1, "kind": "request", "action": "x"}).encode(), "protocol:"),
    (json.dumps(req(0)).encode(), "protocol:"),
    (json.dumps(req(True)).encode(), "protocol:"),
    (json.dumps(req(2**64)).encode(), "protocol:"),
    (json.dumps({"seq": 1, "kind": "response", "action": "x", "payload": {}}).encode(), "protocol:"),
])
def test_garbage_gets_error_responses(endpoint, body, prefix):
    r = endpoint.handle_bytes(frame_body(body), Connection())[0]
    assert not r["allowed"] and r["deny_reason"].startswith(prefix)


def test_unknown_and_malformed_actions(endpoint):
    conn = Connection()
    assert endpoint.handle_bytes(frame(req(1, "format_disk")), conn)[0]["deny_reason"] == "unknown action"
    assert endpoint.handle_bytes(frame(req(2, "mount_device", {"target": 3})), conn)[0]["deny_reason"] == "malformed"


def test_diagnostics_are_off_by_default(web_policy):
    ep = GuestEndpoint(GuestAgent(web_policy))
    assert ep.handle_bytes(frame(req(1, "sim.snapshot")), Connection())[0]["deny_reason"] == "unknown action"


def test_handler_exception_is_contained(endpoint, monkeypatch):
    def boom(payload):
        raise RuntimeError("bug")

    monkeypatch.setitem(endpoint.handlers, "get_properties", boom)
    r = endpoint.handle_bytes(frame(req(1)), Connection())[0]
    assert r["deny_reason"] == "internal: RuntimeError"


def test_reset_installs_new_policy(endpoint):
    t = InProcessTransport(endpoint)
    assert not t.request("sim.reset", {"policy": {"version": 7}})["allowed"]
    assert t.request("sim.reset", {"policy": {"version": 1, "flags": {"allow_dump_stacks": True}}})["allowed"]
    assert t.request("dump_stacks", {})["allowed"]


def test_random_frames_never_crash_the_endpoint(endpoint):
    rng = random.Random(1234)
    conn = Connection()
    templates = [req(1), req(2, "mount_device", {"device_hash": LAYER_A, "target": "/l/a"}),
                 req(3, "create_container", {"container_id": "c"})]
    for i in range(10_000):
        kind = rng.random()
        if kind < 0.3:
            body = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 64)))
        elif kind < 0.7:
            body = bytearray(json.dumps(rng.choice(templates)).encode())
            for _ in range(rng.randint(1, 4)):
                body[rng.randrange(len(body))] = rng.getrandbits(8)
            body = bytes(body)
        else:
            msg = dict(rng.choice(templates))
            msg["seq"] = rng.choice([i + 10, -1, 0, "7", None, 1.5, 2**70])
            body = json.dumps(msg).encode()
        replies = endpoint.handle_bytes(frame_body(body), conn)
        assert len(replies) == 1
        r = replies[0]
        assert set(r) == {"seq", "kind", "action", "allowed", "deny_reason", "payload"}
        assert r["kind"] == "response"
    assert endpoint.agent.fault is None


def test_parse_endpoint():
    assert parse_endpoint("localhost:80") == ("localhost", 80)
    assert parse_endpoint(":9") == ("127.0.0.1", 9)
    with pytest.raises(ValueError):
        parse_endpoint("nohost")


def test_tcp_server_with_concurrent_clients(endpoint):
    server = FramedServer(endpoint, "127.0.0.1", 0)
    server.start_background()
    try:
        host, port = server.address
        errors = []

        def client(n):
            try:
                t = TcpTransport(host, port)
                for i in range(20):
                    r = t.request("mount_scratch", {"target": f"/s/{n}/{i}", "encrypted": True})
                    assert r["allowed"] and r["seq"] == i + 1
                # several frames in one write get one reply each, in order
                replies = t.send_raw(frame(req(100)) + frame(req(99)) + frame(req(101)))
                assert [r["seq"] for r in replies] == [100, 99, 101]
                assert replies[1]["deny_reason"] == "protocol: non-monotonic seq"
                t.close()
            except Exception as exc:  # surfaced below
                errors.append(exc)

        threads = [threading.Thread(target=client, args=(n,)) for n in range(4)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        assert errors == []
        assert len(endpoint.agent.state.store.scratch) == 80
    finally:
        server.shutdown()
        server.server_close()


def test_attestation_endpoint_over_the_wire():
    vendor = VendorAuthority(b"v")
    psp = MockPsp(b"\x01" * 32)
    host_data = b"\x05" * 32
    measurement = psp.launch_finalize(host_data)
    private, der = att.generate_wrapping_key()
    report = psp.issue_report(att.seal_report_request(psp.guest_channel_key, att.runtime_claim_digest(der)))
    chain = vendor.endorse(psp.chip_id, psp.tcb_version, psp.vcek_public)
    service = AttestationService(vendor.public_key, {measurement}, seed=b"s")
    t = InProcessTransport(AttestationEndpoint(service, KeyBroker(service.public_key)))
    assert t.request("register_key", {"key_id": "k", "key": "aa" * 16, "expected_host_data": host_data.hex(),
                                      "allowed_measurements": [measurement.hex()]})["allowed"]
    policy_digest = (host_data + bytes(32)).hex()
    bad = t.request("verify", {"report": report.to_bytes().hex(), "chain": chain.to_bytes().hex(),
                               "policy_digest": ("06" * 32) + "00" * 32, "runtime_claim": der.hex()})
    assert bad["deny_reason"] == att.REJECT_HOST_DATA
    ok = t.request("verify", {"report": report.to_bytes().hex(), "chain": chain.to_bytes().hex(),
                              "policy_digest": policy_digest, "runtime_claim": der.hex()})
    assert ok["allowed"]
    released = t.request("release_key", {"key_id": "k", "token": ok["payload"]["token"], "wrapping_key": der.hex()})
    assert att.unwrap_key(private, bytes.fromhex(released["payload"]["wrapped_key"])) == b"\xaa" * 16
    assert t.request("verify", {"report": "zz"})["deny_reason"] == "malformed"
    assert t.request("release_key", {"key_id": "k", "token": {}, "wrapping_key": ""})["deny_reason"] == "malformed"
