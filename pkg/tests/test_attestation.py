import hashlib
import struct
from dataclasses import replace

import pytest

from ccsim import attestation as att
from ccsim.attestation import (
    AttestationRejected,
    AttestationService,
    KeyBroker,
    KeyReleaseDenied,
    KeyReleasePolicy,
    LaunchError,
    MockPsp,
    ReportRequestRefused,
    VendorAuthority,
)
from ccsim.demo import TAMPERS, attest_demo, expected_measurement, firmware_pages

CHIP = b"\x42" * 32


@pytest.fixture(scope="module")
def wrapping():
    return att.generate_wrapping_key()


def launched(host_data=b"\x01" * 32, pages=2):
    psp = MockPsp(CHIP, tcb_version=3)
    for i in range(pages):
        psp.launch_update(bytes([i]) * att.PAGE_SIZE, 0x1000 * i)
    psp.launch_finalize(host_data)
    return psp


def test_launch_digest_matches_independent_recomputation():
    ctx = hashlib.sha384(b"").digest()
    for i in range(2):
        ctx = hashlib.sha384(ctx + bytes([i]) * 4096 + struct.pack("<Q", 0x1000 * i)).digest()
    assert launched().measurement == ctx


def test_empty_launch_measures_to_initial_context():
    psp = MockPsp(CHIP)
    assert psp.launch_finalize(bytes(32)) == hashlib.sha384(b"").digest()


def test_launch_state_machine():
    psp = MockPsp(CHIP)
    with pytest.raises(LaunchError):
        psp.launch_update(b"short", 0)
    with pytest.raises(LaunchError):
        psp.launch_finalize(b"\x00" * 31)
    with pytest.raises(LaunchError):
        psp.issue_report(b"")
    psp.launch_finalize(bytes(32))
    with pytest.raises(LaunchError):
        psp.launch_update(bytes(4096), 0)
    with pytest.raises(LaunchError):
        psp.launch_finalize(bytes(32))


def test_report_layout_and_round_trip():
    psp = launched()
    report = psp.issue_report(att.seal_report_request(psp.guest_channel_key, b"\x07" * 64))
    raw = report.to_bytes()
    assert len(raw) == att.REPORT_SIZE == 700
    version, tcb = struct.unpack_from("<IQ", raw, 0)
    assert (version, tcb) == (att.REPORT_VERSION, 3)
    assert raw[12:44] == psp.chip_id
    assert raw[44:92] == psp.measurement
    assert raw[92:124] == b"\x01" * 32
    assert raw[124:188] == b"\x07" * 64
    assert raw[252:] == bytes(448)  # Ed25519 signature is zero padded
    assert att.AttestationReport.from_bytes(raw) == report
    with pytest.raises(ValueError):
        att.AttestationReport.from_bytes(raw[:-1])


def test_report_request_must_come_from_the_guest_channel():
    psp = launched()
    forged = att.seal_report_request(b"\x00" * 32, b"\x07" * 64)
    with pytest.raises(ReportRequestRefused):
        psp.issue_report(forged)


def test_vcek_depends_on_chip_and_tcb():
    assert MockPsp(CHIP, 1).vcek_public != MockPsp(CHIP, 2).vcek_public
    assert MockPsp(CHIP, 1).vcek_public != MockPsp(b"\x43" * 32, 1).vcek_public
    assert MockPsp(CHIP, 1).vcek_public == MockPsp(CHIP, 1).vcek_public


def test_chain_round_trip():
    vendor = VendorAuthority(b"seed")
    psp = launched()
    chain = vendor.endorse(psp.chip_id, psp.tcb_version, psp.vcek_public)
    assert len(chain.to_bytes()) == 2 * att.CERT_SIZE
    assert att.CertificateChain.from_bytes(chain.to_bytes()) == chain


class Flow:
    def __init__(self, wrapping_der):
        self.vendor = VendorAuthority(b"v")
        self.psp = launched()
        self.chain = self.vendor.endorse(self.psp.chip_id, self.psp.tcb_version, self.psp.vcek_public)
        self.claim = wrapping_der
        sealed = att.seal_report_request(self.psp.guest_channel_key, att.runtime_claim_digest(self.claim))
        self.report = self.psp.issue_report(sealed)
        self.policy_digest = b"\x01" * 32 + b"\x99" * 32

    def checks(self, report=None, chain=None):
        return att.check_report(report or self.report, chain or self.chain, self.vendor.public_key,
                                {self.psp.measurement}, b"\x01" * 32, att.runtime_claim_digest(self.claim))


def test_untampered_report_passes_every_check(wrapping):
    flow = Flow(wrapping[1])
    assert all(flow.checks().values())


@pytest.mark.parametrize("field, label", [
    ("measurement", att.REJECT_MEASUREMENT),
    ("host_data", att.REJECT_HOST_DATA),
    ("report_data", att.REJECT_REPORT_DATA),
])
def test_field_changes_after_signing_also_break_the_signature(wrapping, field, label):
    flow = Flow(wrapping[1])
    value = bytearray(getattr(flow.report, field))
    value[0] ^= 1
    failed = {k for k, ok in flow.checks(replace(flow.report, **{field: bytes(value)})).items() if not ok}
    assert failed == {label, att.REJECT_SIGNATURE}


def test_signature_padding_must_be_zero(wrapping):
    flow = Flow(wrapping[1])
    sig = bytearray(flow.report.signature)
    sig[100] = 1
    failed = {k for k, ok in flow.checks(replace(flow.report, signature=bytes(sig))).items() if not ok}
    assert failed == {att.REJECT_SIGNATURE}


def test_chain_with_wrong_tcb_or_chip_rejected(wrapping):
    flow = Flow(wrapping[1])
    for chain in (flow.vendor.endorse(flow.psp.chip_id, 9, flow.psp.vcek_public),
                  flow.vendor.endorse(b"\x00" * 32, flow.psp.tcb_version, flow.psp.vcek_public)):
        assert {k for k, ok in flow.checks(chain=chain).items() if not ok} == {att.REJECT_CHAIN}


def test_verify_report_raises_first_failure_in_order(wrapping):
    flow = Flow(wrapping[1])
    rogue = VendorAuthority(b"rogue").endorse(flow.psp.chip_id, flow.psp.tcb_version, flow.psp.vcek_public)
    with pytest.raises(AttestationRejected) as exc:
        att.verify_report(flow.report, rogue, flow.vendor.public_key, set(), bytes(32), bytes(64))
    assert exc.value.reason == att.REJECT_CHAIN


def test_service_issues_verifiable_token(wrapping):
    flow = Flow(wrapping[1])
    service = AttestationService(flow.vendor.public_key, {flow.psp.measurement}, seed=b"s")
    token = service.attest(flow.report, flow.chain, flow.policy_digest, flow.claim)
    assert token.verify(service.public_key)
    assert token.claims["policy_digest"] == flow.policy_digest.hex()
    assert token.claims["host_data"] == (b"\x01" * 32).hex()
    forged = replace(token, claims=dict(token.claims, tcb_version=99))
    assert not forged.verify(service.public_key)
    assert att.AttestationToken.from_dict(token.to_dict()) == token
    with pytest.raises(ValueError):
        service.attest(flow.report, flow.chain, b"short", flow.claim)


def test_key_release_and_denials(wrapping):
    private, der = wrapping
    flow = Flow(der)
    service = AttestationService(flow.vendor.public_key, {flow.psp.measurement}, seed=b"s")
    token = service.attest(flow.report, flow.chain, flow.policy_digest, der)
    broker = KeyBroker(service.public_key)
    broker.register_key("k", b"secret-key-bytes", KeyReleasePolicy(b"\x01" * 32, frozenset({flow.psp.measurement})))
    broker.register_key("other", b"x", KeyReleasePolicy(b"\x02" * 32, frozenset({flow.psp.measurement})))
    assert att.unwrap_key(private, broker.release_key("k", token, der)) == b"secret-key-bytes"

    def denial(*args):
        with pytest.raises(KeyReleaseDenied) as exc:
            broker.release_key(*args)
        return exc.value.reason

    assert denial("missing", token, der) == att.DENY_UNKNOWN_KEY
    assert denial("other", token, der) == att.DENY_POLICY_MISMATCH
    assert denial("k", replace(token, signature=bytes(64)), der) == att.DENY_INVALID_TOKEN
    other_der = att.generate_wrapping_key()[1]
    assert denial("k", token, other_der) == att.DENY_RUNTIME_CLAIM
    other_service = AttestationService(flow.vendor.public_key, {flow.psp.measurement}, seed=b"t")
    assert denial("k", other_service.attest(flow.report, flow.chain, flow.policy_digest, der), der) \
        == att.DENY_INVALID_TOKEN


def test_key_release_policy_validation():
    with pytest.raises(ValueError):
        KeyReleasePolicy(b"short", frozenset({b"m"}))
    with pytest.raises(ValueError):
        KeyReleasePolicy(bytes(32), frozenset())


def test_demo_measurement_is_the_replayed_launch():
    pages = firmware_pages(5)
    psp = MockPsp(CHIP)
    for page, gpa in pages:
        psp.launch_update(page, gpa)
    assert psp.launch_finalize(bytes(32)) == expected_measurement(pages)


@pytest.mark.parametrize("tamper", TAMPERS)
def test_demo_tampers_fail_exactly_their_check(tamper):
    result = attest_demo(tamper=tamper, seed=1)
    if tamper == "none":
        assert result.failed_checks == [] and result.key_unwrapped
    else:
        assert len(result.failed_checks) == 1 and not result.key_released
    expected = {"page": att.REJECT_MEASUREMENT, "host_data": att.REJECT_HOST_DATA,
                "report_data": att.REJECT_REPORT_DATA, "signature": att.REJECT_SIGNATURE,
                "chain": att.REJECT_CHAIN}.get(tamper)
    if expected:
        assert result.failed_checks == [expected]


def test_demo_rejects_unknown_tamper():
    with pytest.raises(ValueError):
        attest_demo(tamper="everything")
