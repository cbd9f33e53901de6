"""Micro-benchmark of the policy decision path."""

from __future__ import annotations

import hashlib
import statistics
import time
from dataclasses import dataclass

from .engine import EnforcementRequest, MetadataStore, OverlayEntry, enforce
from .policy import ExecutionPolicy, policy_from_dict


@dataclass
class BenchResult:
    templates: int
    iterations: int
    median_s: float
    p95_s: float
    allowed: bool

    def to_dict(self) -> dict:
        return {
            "templates": self.templates, "iterations": self.iterations,
            "median_ms": self.median_s * 1e3, "p95_ms": self.p95_s * 1e3, "allowed": self.allowed,
        }


def bench_policy(templates: int = 50) -> ExecutionPolicy:
    """``templates`` templates over one shared layer stack, so every one stays a candidate
    until the container-level checks run (the expensive case)."""
    layers = [hashlib.sha256(f"bench-layer-{i}".encode()).hexdigest() for i in range(3)]
    return policy_from_dict({
        "version": 1,
        "containers": [
            {
                "id": f"t{i}",
                "layers": layers,
                "command": ["/app/server", "--shard", str(i)],
                "env_rules": [
                    {"pattern": "PATH=/usr/bin:/bin", "strategy": "literal"},
                    {"pattern": "PORT=[0-9]{2,5}", "strategy": "regex"},
                    {"pattern": "SHARD_[A-Z]+=.*", "strategy": "regex"},
                ],
                "working_dir": "/app",
                "mounts": [{"source": "/run/secrets/[a-z]+", "destination": "/etc/secrets",
                            "type": "bind", "options": ["ro"]}],
            }
            for i in range(templates)
        ],
    })


def bench_enforce(templates: int = 50, iterations: int = 2000, warmup: int = 200) -> BenchResult:
    """Median wall-clock latency of enforce() for a create_container that matches the last template."""
    policy = bench_policy(templates)
    store = MetadataStore(overlays={
        "o0": OverlayEntry(("/run/layers/0", "/run/layers/1", "/run/layers/2"), "/run/ov/0",
                           frozenset(t.id for t in policy.containers)),
    })
    request = EnforcementRequest("create_container", {
        "container_id": "c0", "overlay_id": "o0",
        "command": ["/app/server", "--shard", str(templates - 1)],
        "env": ["PATH=/usr/bin:/bin", "PORT=8080", "SHARD_NAME=east"],
        "working_dir": "/app",
        "mounts": [{"source": "/run/secrets/db", "destination": "/etc/secrets", "type": "bind", "options": ["ro"]}],
    })
    for _ in range(warmup):
        enforce(policy, store, request)
    samples = []
    clock = time.perf_counter
    for _ in range(iterations):
        t0 = clock()
        decision, _ = enforce(policy, store, request)
        samples.append(clock() - t0)
    samples.sort()
    return BenchResult(templates, iterations, statistics.median(samples),
                       samples[int(0.95 * (len(samples) - 1))], decision.allowed)
