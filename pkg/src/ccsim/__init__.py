"""Desk-scale simulator of a confidential-container control plane.

Modules: ``policy`` (format and measurement), ``engine`` (default-deny
enforcement), ``guest`` (atomic guest agent), ``wire`` (framed host/guest
protocol), ``attestation`` (mock PSP, verifier, key broker), ``storage``
(verity trees and encrypted scratch) and ``cli``.
"""

from .engine import EnforcementDecision, EnforcementRequest, MetadataStore, enforce
from .policy import ExecutionPolicy, canonicalize, measure_policy, parse_policy

__version__ = "0.1.0"

__all__ = [
    "EnforcementDecision", "EnforcementRequest", "ExecutionPolicy", "MetadataStore",
    "canonicalize", "enforce", "measure_policy", "parse_policy",
]
