"""In-process run of the launch, attestation and key-release workflow.

Roles: the tenant authors a policy and registers a key with the key broker;
the (untrusted) host launches the guest through the mock PSP and delivers the
policy; the guest boots, requests a report bound to a fresh wrapping key and
asks the broker for the key through the attestation service.

``tamper`` simulates one adversarial change so that exactly one check fails:

* ``page``: the host launches a modified firmware page (measurement).
* ``host_data``: the host launches and delivers a different policy (host data).
* ``report_data``: the report binds a wrapping key other than the presented one.
* ``signature``: one byte of the report signature is flipped in transit.
* ``chain``: the VCEK is endorsed by a rogue vendor instead of the real one.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

from . import attestation as att
from .attestation import (
    AttestationRejected,
    AttestationService,
    KeyBroker,
    KeyReleaseDenied,
    KeyReleasePolicy,
    MockPsp,
    VendorAuthority,
)
from .guest import GuestAgent
from .policy import ExecutionPolicy, canonicalize, measure_policy, policy_from_dict

TAMPERS = ("none", "page", "host_data", "report_data", "signature", "chain")
FIRMWARE_PAGES = 4
FIRMWARE_BASE_GPA = 0xFFFC0000
KEY_ID = "tenant-data-key"


def demo_policy() -> ExecutionPolicy:
    return policy_from_dict({
        "version": 1,
        "containers": [{
            "id": "web",
            "layers": [hashlib.sha256(b"demo-layer-0").hexdigest(), hashlib.sha256(b"demo-layer-1").hexdigest()],
            "command": ["/usr/bin/nginx", "-g", "daemon off;"],
            "env_rules": [{"pattern": "PATH=/usr/bin:/bin", "strategy": "literal"}],
            "working_dir": "/",
        }],
    })


def firmware_pages(seed: int) -> list[tuple[bytes, int]]:
    """Deterministic stand-in for the launched guest image: (page, gpa) pairs."""
    pages = []
    for i in range(FIRMWARE_PAGES):
        page = hashlib.shake_256(f"firmware/{seed}/{i}".encode()).digest(att.PAGE_SIZE)
        pages.append((page, FIRMWARE_BASE_GPA + i * att.PAGE_SIZE))
    return pages


def expected_measurement(pages: list[tuple[bytes, int]]) -> bytes:
    """Tenant-side recomputation of the launch digest from the published image."""
    ctx = att.launch_digest_init()
    for page, gpa in pages:
        ctx = att.launch_digest_update(ctx, page, gpa)
    return ctx


def _seeded(label: str, seed: int) -> bytes:
    return hashlib.sha256(f"{label}/{seed}".encode()).digest()


def _other_policy(policy: ExecutionPolicy) -> ExecutionPolicy:
    """The host's substitute: the tenant policy plus one permissive flag."""
    return replace(policy, flags=replace(policy.flags, allow_dump_stacks=not policy.flags.allow_dump_stacks))


@dataclass
class DemoResult:
    tamper: str
    checks: dict[str, bool]
    token_issued: bool = False
    rejection: str | None = None
    key_released: bool = False
    key_unwrapped: bool = False
    denial: str | None = None
    steps: list[str] = field(default_factory=list)

    @property
    def failed_checks(self) -> list[str]:
        return [label for label, ok in self.checks.items() if not ok]

    def to_dict(self) -> dict:
        return {
            "tamper": self.tamper, "checks": self.checks, "failed_checks": self.failed_checks,
            "token_issued": self.token_issued, "rejection": self.rejection,
            "key_released": self.key_released, "key_unwrapped": self.key_unwrapped,
            "denial": self.denial, "steps": self.steps,
        }


def attest_demo(policy: ExecutionPolicy | None = None, tamper: str = "none", seed: int = 0) -> DemoResult:
    if tamper not in TAMPERS:
        raise ValueError(f"unknown tamper {tamper!r}; choose from {', '.join(TAMPERS)}")
    policy = policy or demo_policy()
    steps: list[str] = []

    # Tenant: publish the expected launch digest and policy digest, register a key.
    vendor = VendorAuthority(_seeded("vendor", seed))
    pages = firmware_pages(seed)
    tenant_measurement = expected_measurement(pages)
    tenant_digest = measure_policy(policy).digest
    service = AttestationService(vendor.public_key, {tenant_measurement}, seed=_seeded("service", seed))
    broker = KeyBroker(service.public_key)
    secret_key = _seeded("tenant-key", seed)
    broker.register_key(KEY_ID, secret_key, KeyReleasePolicy(tenant_digest[:32], frozenset({tenant_measurement})))
    steps.append("tenant registered key with expected host data and measurement")

    # Host: launch through the PSP and deliver the policy.
    psp = MockPsp(_seeded("chip", seed))
    for i, (page, gpa) in enumerate(pages):
        if tamper == "page" and i == 1:
            page = bytes([page[0] ^ 0x01]) + page[1:]
        psp.launch_update(page, gpa)
    delivered = _other_policy(policy) if tamper == "host_data" else policy
    delivered_doc = canonicalize(delivered)
    psp.launch_finalize(measure_policy(delivered).host_data)
    steps.append("host launched guest and finalized with host data of the delivered policy")
    if tamper == "chain":
        chain = VendorAuthority(_seeded("rogue-vendor", seed)).endorse(psp.chip_id, psp.tcb_version, psp.vcek_public)
    else:
        chain = vendor.endorse(psp.chip_id, psp.tcb_version, psp.vcek_public)

    # Guest: boot (re-measuring the delivered policy), make a wrapping key, request a report.
    agent = GuestAgent.boot(delivered_doc, psp.host_data)
    steps.append("guest booted; delivered policy matches launch host data")
    wrap_private, wrap_der = att.generate_wrapping_key()
    bound_claim = att.generate_wrapping_key()[1] if tamper == "report_data" else wrap_der
    sealed = att.seal_report_request(psp.guest_channel_key, att.runtime_claim_digest(bound_claim))
    report = psp.issue_report(sealed)
    if tamper == "signature":
        sig = bytearray(report.signature)
        sig[5] ^= 0x01
        report = replace(report, signature=bytes(sig))
    policy_digest = measure_policy(agent.policy).digest
    steps.append("guest obtained report bound to its wrapping key")

    # Verifier: label every check, then try the real issuance path.
    checks = att.check_report(report, chain, vendor.public_key, {tenant_measurement},
                              tenant_digest[:32], att.runtime_claim_digest(wrap_der))
    result = DemoResult(tamper, checks, steps=steps)
    try:
        token = service.attest(report, chain, policy_digest, wrap_der)
    except AttestationRejected as exc:
        result.rejection = exc.reason
        steps.append(f"attestation rejected: {exc.reason}")
        return result
    result.token_issued = True
    try:
        wrapped = broker.release_key(KEY_ID, token, wrap_der)
    except KeyReleaseDenied as exc:
        result.denial = exc.reason
        steps.append(f"key release denied: {exc.reason}")
        return result
    result.key_released = True
    result.key_unwrapped = att.unwrap_key(wrap_private, wrapped) == secret_key
    steps.append("key released and unwrapped" if result.key_unwrapped else "unwrapped key does not match")
    return result
