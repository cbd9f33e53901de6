"""Mock platform security processor, report verifier and key-release service.

Report wire layout (700 bytes, integers little-endian)::

    version u32 | tcb_version u64 | chip_id 32 | measurement 48 |
    host_data 32 | report_data 64 | signature 512

The signature covers every byte before it.  It is an Ed25519 signature by the
chip's VCEK, zero-padded to 512 bytes.

Certificates use the same fixed-width style (204 + 512 bytes)::

    role u32 | chip_id 32 | tcb_version u64 | public_key 32 | issuer_key 32 |
    reserved 96 | signature 512

``role`` is 1 for the self-signed vendor root and 2 for a VCEK endorsement.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
import struct
import threading
from dataclasses import dataclass, field, replace
from typing import Iterable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

PAGE_SIZE = 4096
REPORT_VERSION = 2
SIG_FIELD = 512
_HEAD = struct.Struct("<IQ")
REPORT_BODY_SIZE = _HEAD.size + 32 + 48 + 32 + 64
REPORT_SIZE = REPORT_BODY_SIZE + SIG_FIELD

ROLE_ROOT = 1
ROLE_VCEK = 2
_CERT_HEAD = struct.Struct("<I32sQ32s32s96s")
CERT_SIZE = _CERT_HEAD.size + SIG_FIELD

_REQUEST_AAD = b"ccsim/report-request/v1"


class LaunchError(Exception):
    pass


class ReportRequestRefused(Exception):
    """The guest-channel request did not authenticate."""


class AttestationRejected(Exception):
    """Report verification failed; ``reason`` is one of the REJECT_* labels."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class KeyReleaseDenied(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


REJECT_SIGNATURE = "bad_signature"
REJECT_CHAIN = "bad_chain"
REJECT_MEASUREMENT = "measurement_mismatch"
REJECT_HOST_DATA = "host_data_mismatch"
REJECT_REPORT_DATA = "report_data_mismatch"

DENY_UNKNOWN_KEY = "unknown_key"
DENY_INVALID_TOKEN = "invalid_token"
DENY_POLICY_MISMATCH = "policy_mismatch"
DENY_RUNTIME_CLAIM = "runtime_claim_mismatch"


def _pad_sig(sig: bytes) -> bytes:
    return sig + b"\x00" * (SIG_FIELD - len(sig))


def _raw_public(key: Ed25519PublicKey) -> bytes:
    return key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def _verify_ed25519(public: bytes, sig_field: bytes, message: bytes) -> bool:
    sig, pad = sig_field[:64], sig_field[64:]
    if any(pad):
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(sig, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def derive_vcek(chip_secret: bytes, tcb_version: int) -> Ed25519PrivateKey:
    seed = HKDF(
        algorithm=hashes.SHA256(), length=32, salt=None, info=b"vcek" + struct.pack("<Q", tcb_version)
    ).derive(chip_secret)
    return Ed25519PrivateKey.from_private_bytes(seed)


def chip_id_for(chip_secret: bytes) -> bytes:
    return hashlib.sha256(b"chip-id" + chip_secret).digest()


# -- report ---------------------------------------------------------------------


@dataclass(frozen=True)
class AttestationReport:
    version: int
    tcb_version: int
    chip_id: bytes
    measurement: bytes
    host_data: bytes
    report_data: bytes
    signature: bytes = bytes(SIG_FIELD)

    def body(self) -> bytes:
        return (
            _HEAD.pack(self.version, self.tcb_version)
            + self.chip_id + self.measurement + self.host_data + self.report_data
        )

    def to_bytes(self) -> bytes:
        return self.body() + self.signature

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AttestationReport":
        if len(raw) != REPORT_SIZE:
            raise ValueError(f"report must be {REPORT_SIZE} bytes, got {len(raw)}")
        version, tcb = _HEAD.unpack_from(raw, 0)
        o = _HEAD.size
        fields = []
        for n in (32, 48, 32, 64):
            fields.append(bytes(raw[o:o + n]))
            o += n
        return cls(version, tcb, *fields, signature=bytes(raw[o:]))


# -- certificates ------------------------------------------------------------------


@dataclass(frozen=True)
class Certificate:
    role: int
    chip_id: bytes
    tcb_version: int
    public_key: bytes
    issuer_key: bytes
    signature: bytes = bytes(SIG_FIELD)

    def body(self) -> bytes:
        return _CERT_HEAD.pack(
            self.role, self.chip_id, self.tcb_version, self.public_key, self.issuer_key, bytes(96)
        )

    def to_bytes(self) -> bytes:
        return self.body() + self.signature

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Certificate":
        if len(raw) != CERT_SIZE:
            raise ValueError(f"certificate must be {CERT_SIZE} bytes")
        role, chip, tcb, pub, issuer, _ = _CERT_HEAD.unpack_from(raw, 0)
        return cls(role, chip, tcb, pub, issuer, bytes(raw[_CERT_HEAD.size:]))


@dataclass(frozen=True)
class CertificateChain:
    root: Certificate
    vcek: Certificate

    def to_bytes(self) -> bytes:
        return self.root.to_bytes() + self.vcek.to_bytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CertificateChain":
        if len(raw) != 2 * CERT_SIZE:
            raise ValueError("chain must hold exactly two certificates")
        return cls(Certificate.from_bytes(raw[:CERT_SIZE]), Certificate.from_bytes(raw[CERT_SIZE:]))


class VendorAuthority:
    """Mock vendor CA endorsing per-chip VCEKs."""

    def __init__(self, seed: bytes | None = None):
        seed = os.urandom(32) if seed is None else hashlib.sha256(b"vendor" + seed).digest()
        self._key = Ed25519PrivateKey.from_private_bytes(seed)
        self.public_key = _raw_public(self._key.public_key())
        body = Certificate(ROLE_ROOT, bytes(32), 0, self.public_key, self.public_key)
        self.root_certificate = replace(body, signature=_pad_sig(self._key.sign(body.body())))

    def endorse(self, chip_id: bytes, tcb_version: int, vcek_public: bytes) -> CertificateChain:
        body = Certificate(ROLE_VCEK, chip_id, tcb_version, vcek_public, self.public_key)
        cert = replace(body, signature=_pad_sig(self._key.sign(body.body())))
        return CertificateChain(self.root_certificate, cert)


# -- PSP -----------------------------------------------------------------------------


def launch_digest_init() -> bytes:
    return hashlib.sha384(b"").digest()


def launch_digest_update(context: bytes, page: bytes, gpa: int) -> bytes:
    return hashlib.sha384(context + page + struct.pack("<Q", gpa)).digest()


def seal_report_request(channel_key: bytes, report_data: bytes, nonce: bytes | None = None) -> bytes:
    """Guest side of the secure channel: authenticate a report request."""
    if len(report_data) != 64:
        raise ValueError("report_data must be 64 bytes")
    nonce = os.urandom(12) if nonce is None else nonce
    return nonce + AESGCM(channel_key).encrypt(nonce, report_data, _REQUEST_AAD)


class MockPsp:
    """Launch measurement and report issuance for one guest on one chip."""

    def __init__(self, chip_secret: bytes, tcb_version: int = 1, channel_key: bytes | None = None):
        if len(chip_secret) != 32:
            raise ValueError("chip_secret must be 32 bytes")
        self.chip_secret = chip_secret
        self.tcb_version = tcb_version
        self.chip_id = chip_id_for(chip_secret)
        self._vcek = derive_vcek(chip_secret, tcb_version)
        self.vcek_public = _raw_public(self._vcek.public_key())
        # Lives in the guest's secrets page; the host never sees it.
        self.guest_channel_key = os.urandom(32) if channel_key is None else channel_key
        self._context = launch_digest_init()
        self.measurement: bytes | None = None
        self.host_data: bytes | None = None

    @property
    def finalized(self) -> bool:
        return self.measurement is not None

    def launch_update(self, page: bytes, gpa: int) -> "MockPsp":
        if self.finalized:
            raise LaunchError("launch already finalized")
        if len(page) != PAGE_SIZE:
            raise LaunchError(f"page must be {PAGE_SIZE} bytes, got {len(page)}")
        if not 0 <= gpa < 2**64:
            raise LaunchError("gpa out of range")
        self._context = launch_digest_update(self._context, bytes(page), gpa)
        return self

    def launch_finalize(self, host_data: bytes) -> bytes:
        if self.finalized:
            raise LaunchError("launch already finalized")
        if len(host_data) != 32:
            raise LaunchError("host_data must be 32 bytes")
        self.measurement = self._context
        self.host_data = bytes(host_data)
        return self.measurement

    def issue_report(self, sealed_request: bytes) -> AttestationReport:
        if not self.finalized:
            raise LaunchError("launch not finalized")
        try:
            report_data = AESGCM(self.guest_channel_key).decrypt(
                sealed_request[:12], sealed_request[12:], _REQUEST_AAD
            )
        except (InvalidTag, ValueError):
            raise ReportRequestRefused("request does not authenticate on the guest channel") from None
        if len(report_data) != 64:
            raise ReportRequestRefused("report_data must be 64 bytes")
        unsigned = AttestationReport(
            REPORT_VERSION, self.tcb_version, self.chip_id, self.measurement, self.host_data, report_data
        )
        sig = _pad_sig(self._vcek.sign(unsigned.body()))
        return replace(unsigned, signature=sig)


# -- verifier / token service ------------------------------------------------------------


@dataclass(frozen=True)
class AttestationToken:
    claims: dict
    issuer: str
    signature: bytes

    def signed_bytes(self) -> bytes:
        return json.dumps({"claims": self.claims, "issuer": self.issuer}, sort_keys=True,
                          separators=(",", ":")).encode()

    def to_dict(self) -> dict:
        return {"claims": self.claims, "issuer": self.issuer, "signature": self.signature.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "AttestationToken":
        return cls(dict(d["claims"]), str(d["issuer"]), bytes.fromhex(d["signature"]))

    def verify(self, service_public_key: bytes) -> bool:
        return _verify_ed25519(service_public_key, _pad_sig(self.signature), self.signed_bytes())


def runtime_claim_digest(claim: bytes) -> bytes:
    """report_data value binding a runtime claim (e.g. a wrapping public key)."""
    return hashlib.sha512(claim).digest()


def _chain_ok(chain: CertificateChain, report: AttestationReport, vendor_root_public_key: bytes) -> bool:
    root, vcek = chain.root, chain.vcek
    return (
        root.role == ROLE_ROOT
        and root.public_key == vendor_root_public_key
        and root.issuer_key == vendor_root_public_key
        and _verify_ed25519(root.public_key, root.signature, root.body())
        and vcek.role == ROLE_VCEK
        and vcek.issuer_key == root.public_key
        and _verify_ed25519(root.public_key, vcek.signature, vcek.body())
        and vcek.chip_id == report.chip_id
        and vcek.tcb_version == report.tcb_version
    )


def check_report(
    report: AttestationReport,
    chain: CertificateChain,
    vendor_root_public_key: bytes,
    expected_measurements: Iterable[bytes],
    expected_host_data: bytes,
    expected_report_data: bytes,
) -> dict[str, bool]:
    """Evaluate every verification check independently, keyed by rejection label."""
    return {
        REJECT_CHAIN: _chain_ok(chain, report, vendor_root_public_key),
        REJECT_SIGNATURE: _verify_ed25519(chain.vcek.public_key, report.signature, report.body()),
        REJECT_MEASUREMENT: report.measurement in {bytes(m) for m in expected_measurements},
        REJECT_HOST_DATA: hmac.compare_digest(report.host_data, expected_host_data),
        REJECT_REPORT_DATA: hmac.compare_digest(report.report_data, expected_report_data),
    }


def verify_report(
    report: AttestationReport,
    chain: CertificateChain,
    vendor_root_public_key: bytes,
    expected_measurements: Iterable[bytes],
    expected_host_data: bytes,
    expected_report_data: bytes,
) -> None:
    """Raise AttestationRejected with the label of the first failing check.

    Order: chain, signature, measurement, host data, report data.
    """
    checks = check_report(report, chain, vendor_root_public_key, expected_measurements,
                          expected_host_data, expected_report_data)
    for label, ok in checks.items():
        if not ok:
            raise AttestationRejected(label)


class AttestationService:
    """Verifies evidence and issues signed tokens of platform, init and runtime claims."""

    def __init__(self, vendor_root_public_key: bytes, expected_measurements: Iterable[bytes],
                 issuer: str = "ccsim-attestation", seed: bytes | None = None):
        self.vendor_root_public_key = vendor_root_public_key
        self.expected_measurements = frozenset(bytes(m) for m in expected_measurements)
        self.issuer = issuer
        seed = os.urandom(32) if seed is None else hashlib.sha256(b"maa" + seed).digest()
        self._key = Ed25519PrivateKey.from_private_bytes(seed)
        self.public_key = _raw_public(self._key.public_key())

    def attest(self, report: AttestationReport, chain: CertificateChain,
               policy_digest: bytes, runtime_claim: bytes) -> AttestationToken:
        """Verify a report against the presented policy digest and runtime claim."""
        if len(policy_digest) != 64:
            raise ValueError("policy_digest must be the 64-byte policy measurement")
        verify_report(
            report, chain, self.vendor_root_public_key, self.expected_measurements,
            expected_host_data=policy_digest[:32],
            expected_report_data=runtime_claim_digest(runtime_claim),
        )
        claims = {
            "measurement": report.measurement.hex(),
            "host_data": report.host_data.hex(),
            "policy_digest": policy_digest.hex(),
            "report_data": report.report_data.hex(),
            "tcb_version": report.tcb_version,
        }
        unsigned = AttestationToken(claims, self.issuer, b"")
        return AttestationToken(claims, self.issuer, self._key.sign(unsigned.signed_bytes()))


# -- key release ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyReleasePolicy:
    expected_host_data: bytes
    allowed_measurements: frozenset[bytes]

    def __post_init__(self):
        if len(self.expected_host_data) != 32:
            raise ValueError("expected_host_data must be 32 bytes")
        if not self.allowed_measurements:
            raise ValueError("allowed_measurements must not be empty")


@dataclass
class KeyBroker:
    """Key management service releasing keys wrapped to attested guests."""

    service_public_key: bytes
    _keys: dict[str, tuple[bytes, KeyReleasePolicy]] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def register_key(self, key_id: str, key: bytes, policy: KeyReleasePolicy) -> None:
        with self._lock:
            self._keys[key_id] = (bytes(key), policy)

    def release_key(self, key_id: str, token: AttestationToken, wrapping_public_key_der: bytes) -> bytes:
        with self._lock:
            entry = self._keys.get(key_id)
        if entry is None:
            raise KeyReleaseDenied(DENY_UNKNOWN_KEY, key_id)
        if not token.verify(self.service_public_key):
            raise KeyReleaseDenied(DENY_INVALID_TOKEN)
        key, policy = entry
        claims = token.claims
        try:
            host_data = bytes.fromhex(claims["host_data"])
            measurement = bytes.fromhex(claims["measurement"])
            report_data = bytes.fromhex(claims["report_data"])
        except (KeyError, TypeError, ValueError):
            raise KeyReleaseDenied(DENY_INVALID_TOKEN, "missing claims") from None
        if not hmac.compare_digest(host_data, policy.expected_host_data) or (
            measurement not in policy.allowed_measurements
        ):
            raise KeyReleaseDenied(DENY_POLICY_MISMATCH)
        if not hmac.compare_digest(report_data, runtime_claim_digest(wrapping_public_key_der)):
            raise KeyReleaseDenied(DENY_RUNTIME_CLAIM)
        try:
            public = serialization.load_der_public_key(wrapping_public_key_der)
        except ValueError:
            raise KeyReleaseDenied(DENY_RUNTIME_CLAIM, "wrapping key is not a DER public key") from None
        if not isinstance(public, rsa.RSAPublicKey):
            raise KeyReleaseDenied(DENY_RUNTIME_CLAIM, "wrapping key must be RSA")
        return public.encrypt(key, _oaep())


def _oaep() -> padding.OAEP:
    return padding.OAEP(mgf=padding.MGF1(algorithm=hashes.SHA256()), algorithm=hashes.SHA256(), label=None)


def generate_wrapping_key(bits: int = 2048) -> tuple[rsa.RSAPrivateKey, bytes]:
    """Guest-side RSA wrapping key pair; returns (private key, public DER)."""
    private = rsa.generate_private_key(public_exponent=65537, key_size=bits)
    der = private.public_key().public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )
    return private, der


def unwrap_key(private: rsa.RSAPrivateKey, wrapped: bytes) -> bytes:
    return private.decrypt(wrapped, _oaep())
