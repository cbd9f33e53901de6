"""Randomized adversarial traces checked step by step against the safety oracle."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .engine import EnforcementRequest
from .generate import HOST_PATTERNS, MOUNT_SAMPLES, REGEX_ENV, ROGUE_SOURCES, random_policy
from .guest import handle_request, initial_state, snapshot, UvmState
from .oracle import safety_violations
from .policy import ContainerTemplate, EnvRule, ExecutionPolicy

DEV_TARGETS = [f"/run/layers/{i}" for i in range(6)]
OVERLAY_IDS = [f"o{i}" for i in range(3)]
OVERLAY_TARGETS = [f"/run/ov/{i}" for i in range(3)]
CONTAINER_IDS = [f"c{i}" for i in range(3)]
SCRATCH_TARGETS = [f"/run/scratch/{i}" for i in range(2)]
HOST_TARGETS = ["/dev/sda", "/dev/gpu", "/dev/host/../gpu0"]
JUNK_ENV = ["LD_PRELOAD=/tmp/evil.so", "PATH=/tmp", "PORT=abc", "X="]
ROGUE_HASH = "f" * 64
DEFAULT_POLICIES = 24


@dataclass
class FuzzReport:
    seed: int
    traces: int
    steps_per_trace: int
    policies: int = 0
    steps: int = 0
    allowed: int = 0
    denied: int = 0
    safety_violations: int = 0
    atomicity_violations: int = 0
    by_action: dict = field(default_factory=dict)
    first_violation: str | None = None

    @property
    def ok(self) -> bool:
        return self.safety_violations == 0 and self.atomicity_violations == 0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "traces": self.traces, "steps_per_trace": self.steps_per_trace,
            "policies": self.policies, "steps": self.steps, "allowed": self.allowed,
            "denied": self.denied, "safety_violations": self.safety_violations,
            "atomicity_violations": self.atomicity_violations,
            "by_action": {k: self.by_action[k] for k in sorted(self.by_action)},
            "first_violation": self.first_violation, "ok": self.ok,
        }


def _env_sample(rng: random.Random, rule: EnvRule) -> str | None:
    if rule.strategy == "literal":
        return rule.pattern
    samples = REGEX_ENV.get(rule.pattern)
    return rng.choice(samples) if samples else None


def _env_for(rng: random.Random, rules) -> list[str]:
    env = [v for v in (_env_sample(rng, r) for r in rules if rng.random() < 0.8) if v is not None]
    if rng.random() < 0.15:
        env.append(rng.choice(JUNK_ENV))
    return env


class TraceGenerator:
    """Draws requests that are mostly plausible for the current state, often tampered."""

    def __init__(self, rng: random.Random, policy: ExecutionPolicy):
        self.rng = rng
        self.policy = policy
        self.templates = list(policy.containers)

    def _template(self) -> ContainerTemplate | None:
        return self.rng.choice(self.templates) if self.templates else None

    def _pick(self, existing, pool):
        existing = list(existing)
        if existing and self.rng.random() < 0.8:
            return self.rng.choice(sorted(existing))
        return self.rng.choice(pool)

    def mount_device(self, state):
        rng, t = self.rng, self._template()
        digest = rng.choice(t.layers) if t and rng.random() < 0.85 else ROGUE_HASH
        free = [d for d in DEV_TARGETS if d not in state.store.devices]
        target = rng.choice(free) if free and rng.random() < 0.8 else rng.choice(DEV_TARGETS)
        return {"device_hash": digest, "target": target}

    def mount_overlay(self, state):
        rng, t = self.rng, self._template()
        by_digest = {}
        for target, digest in sorted(state.store.devices.items()):
            by_digest.setdefault(digest, []).append(target)
        paths = []
        for digest in (t.layers if t else ()):
            options = by_digest.get(digest) or DEV_TARGETS
            paths.append(rng.choice(options))
        if not paths:
            paths = [rng.choice(DEV_TARGETS)]
        roll = rng.random()
        if roll < 0.1:
            paths.reverse()
        elif roll < 0.2:
            paths.insert(rng.randrange(len(paths) + 1), rng.choice(DEV_TARGETS))
        elif roll < 0.25 and len(paths) > 1:
            paths.pop(rng.randrange(len(paths)))
        return {"overlay_id": rng.choice(OVERLAY_IDS), "layer_paths": paths,
                "target": rng.choice(OVERLAY_TARGETS)}

    def create_container(self, state):
        rng = self.rng
        oid = self._pick(state.store.overlays, OVERLAY_IDS)
        entry = state.store.overlays.get(oid)
        tid = rng.choice(sorted(entry.candidates)) if entry else None
        t = self.policy.template(tid) if tid else self._template()
        if t is None:
            return {"container_id": rng.choice(CONTAINER_IDS), "overlay_id": oid, "command": ["/bin/sh"],
                    "env": [], "working_dir": "/", "mounts": []}
        mounts = []
        for m in t.mounts:
            if rng.random() < 0.7:
                mounts.append({"source": MOUNT_SAMPLES.get(m.source, m.source), "destination": m.destination,
                               "type": m.type, "options": list(reversed(m.options))})
        command = list(t.command)
        working_dir = t.working_dir
        roll = rng.random()
        if roll < 0.08:
            command.append("--evil")
        elif roll < 0.14:
            working_dir = "/tmp"
        elif roll < 0.2 and mounts:
            mounts[0]["destination"] = "/"
        elif roll < 0.25:
            mounts.append({"source": rng.choice(ROGUE_SOURCES), "destination": "/etc/secrets",
                           "type": "bind", "options": ["ro"]})
        return {"container_id": self._pick([], CONTAINER_IDS), "overlay_id": oid, "command": command,
                "env": _env_for(rng, t.env_rules), "working_dir": working_dir, "mounts": mounts}

    def _exec_like(self, rules):
        rng = self.rng
        if rules and rng.random() < 0.85:
            r = rng.choice(rules)
            command, env, wd = list(r.command), _env_for(rng, r.env_rules), r.working_dir
        else:
            command, env, wd = ["/bin/bash", "-i"], [], "/"
        if rng.random() < 0.1:
            command = command + ["; rm -rf /"]
        return {"command": command, "env": env, "working_dir": wd}

    def exec_in_container(self, state):
        cid = self._pick(state.store.containers, CONTAINER_IDS)
        entry = state.store.containers.get(cid)
        rules = []
        if entry:
            for tid in sorted(entry.candidates):
                rules.extend(self.policy.template(tid).exec_processes)
        return {"container_id": cid, **self._exec_like(rules)}

    def exec_external(self, state):
        return self._exec_like(list(self.policy.external_processes))

    def signal_process(self, state):
        rng = self.rng
        cid = self._pick(state.store.containers, CONTAINER_IDS)
        entry = state.store.containers.get(cid)
        commands = [list(entry.command)] + [list(c) for c in entry.exec_commands] if entry else [["/bin/sh"]]
        signals = set()
        if entry:
            for tid in entry.candidates:
                signals.update(self.policy.template(tid).signals)
        sig = rng.choice(sorted(signals)) if signals and rng.random() < 0.7 else rng.randint(1, 31)
        return {"container_id": cid, "signal": sig, "command": rng.choice(commands)}

    def shutdown_container(self, state):
        return {"container_id": self._pick(state.store.containers, CONTAINER_IDS)}

    def unmount_device(self, state):
        return {"target": self._pick(state.store.devices, DEV_TARGETS)}

    def unmount_overlay(self, state):
        return {"target": self._pick([o.target for o in state.store.overlays.values()], OVERLAY_TARGETS)}

    def mount_host_device(self, state):
        rng = self.rng
        allowed = [s for p in self.policy.flags.allow_host_device_mounts for s in HOST_PATTERNS.get(p, [])]
        pool = allowed + HOST_TARGETS if allowed and rng.random() < 0.7 else HOST_TARGETS
        return {"target": rng.choice(pool)}

    def unmount_host_device(self, state):
        return {"target": self._pick(state.store.host_mounts, HOST_TARGETS)}

    def mount_scratch(self, state):
        return {"target": self.rng.choice(SCRATCH_TARGETS), "encrypted": self.rng.random() < 0.7}

    def unmount_scratch(self, state):
        return {"target": self._pick(state.store.scratch, SCRATCH_TARGETS)}

    def _malformed(self, state):
        rng = self.rng
        action = rng.choice(list(WEIGHTS))
        params = dict(self._params(action, state))
        roll = rng.random()
        if roll < 0.3 and params:
            params.pop(rng.choice(sorted(params)))
        elif roll < 0.6:
            params["extra"] = 1
        elif roll < 0.8 and params:
            params[rng.choice(sorted(params))] = rng.choice([None, 7, "", [], {"a": 1}, True])
        else:
            return EnforcementRequest("format_disk", params)
        return EnforcementRequest(action, params)

    def _params(self, action, state):
        method = getattr(self, action, None)
        return method(state) if method else {}

    def next_request(self, state) -> EnforcementRequest:
        rng = self.rng
        if rng.random() < 0.05:
            return self._malformed(state)
        action = rng.choices(list(WEIGHTS), weights=list(WEIGHTS.values()))[0]
        return EnforcementRequest(action, self._params(action, state))


WEIGHTS = {
    "mount_device": 18, "unmount_device": 3, "mount_overlay": 14, "unmount_overlay": 2,
    "create_container": 14, "exec_in_container": 9, "exec_external": 4, "shutdown_container": 3,
    "signal_process": 7, "mount_host_device": 3, "unmount_host_device": 2, "mount_scratch": 5,
    "unmount_scratch": 2, "get_properties": 2, "dump_stacks": 2, "runtime_logging": 2,
    "container_logging": 2,
}


def _fixed_keys():
    counter = 0

    def key() -> bytes:
        nonlocal counter
        counter += 1
        return counter.to_bytes(32, "little")

    return key


def run_trace(policy: ExecutionPolicy, rng: random.Random, steps: int, report: FuzzReport) -> UvmState:
    gen = TraceGenerator(rng, policy)
    state = initial_state(policy)
    keys = _fixed_keys()
    for _ in range(steps):
        request = gen.next_request(state)
        before = snapshot(state)
        response, state_after = handle_request(state, request, key_source=keys)
        counts = report.by_action.setdefault(str(request.action), [0, 0])
        report.steps += 1
        if response.allowed:
            report.allowed += 1
            counts[0] += 1
        else:
            report.denied += 1
            counts[1] += 1
            if state_after is not state or snapshot(state_after) != before:
                report.atomicity_violations += 1
                report.first_violation = report.first_violation or f"atomicity: {request}"
        bad = safety_violations(state_after)
        if bad:
            report.safety_violations += 1
            report.first_violation = report.first_violation or f"safety after {request}: {bad}"
        state = state_after
        state.log.clear()  # keep memory flat; the log is diagnostic only
    return state


def fuzz_traces(
    policy: ExecutionPolicy | None = None,
    step_count: int = 50,
    trace_count: int = 1000,
    seed: int = 0,
    n_policies: int = DEFAULT_POLICIES,
) -> FuzzReport:
    """Run ``trace_count`` traces of ``step_count`` steps; deterministic in ``seed``.

    Without a policy, trace ``i`` runs against generated policy ``i % n_policies``.
    """
    if step_count < 1:
        raise ValueError("step_count must be >= 1")
    rng = random.Random(seed)
    policies = [policy] if policy is not None else [random_policy(rng) for _ in range(n_policies)]
    report = FuzzReport(seed, trace_count, step_count, policies=len(policies) if trace_count else 0)
    for i in range(trace_count):
        run_trace(policies[i % len(policies)], random.Random(rng.getrandbits(64)), step_count, report)
    return report
