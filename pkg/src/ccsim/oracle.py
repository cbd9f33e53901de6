"""Independent safety check over a guest state.

Deliberately shares no matching code with the engine: every predicate is
re-derived here from the policy document so that a bug in a rule cannot hide
itself from the check.
"""

from __future__ import annotations

import re

from .guest import ERASED, UvmState


def _env_ok(var: str, rules) -> bool:
    for r in rules:
        if r.strategy == "literal" and var == r.pattern:
            return True
        if r.strategy == "regex" and re.fullmatch(r.pattern, var):
            return True
    return False


def safety_violations(state: UvmState) -> list[str]:
    """Every way ``state`` breaks the safety invariant; empty when safe."""
    policy = state.policy
    store = state.store
    templates = {t.id: t for t in policy.containers}
    layers = set()
    for t in policy.containers:
        layers.update(t.layers)
    bad: list[str] = []

    for target, digest in store.devices.items():
        if digest not in layers:
            bad.append(f"device {target} has digest outside the policy")

    for oid, ov in store.overlays.items():
        if not ov.candidates:
            bad.append(f"overlay {oid} has no candidates")
        for tid in ov.candidates:
            t = templates.get(tid)
            if t is None:
                bad.append(f"overlay {oid} names unknown template {tid}")
            elif len(t.layers) != len(ov.layer_paths):
                bad.append(f"overlay {oid} layer count differs from template {tid}")

    for cid, c in store.containers.items():
        if not c.candidates:
            bad.append(f"container {cid} has no candidates")
        for tid in c.candidates:
            t = templates.get(tid)
            if t is None:
                bad.append(f"container {cid} names unknown template {tid}")
                continue
            if tuple(t.command) != tuple(c.command):
                bad.append(f"container {cid} command not permitted by {tid}")
            for var in c.env:
                if not _env_ok(var, t.env_rules):
                    bad.append(f"container {cid} env {var!r} not permitted by {tid}")
            for cmd in c.exec_commands:
                if not any(tuple(r.command) == tuple(cmd) for r in t.exec_processes):
                    bad.append(f"container {cid} exec {cmd!r} not permitted by {tid}")

    for target, encrypted in store.scratch.items():
        if not encrypted and not policy.flags.allow_unencrypted_scratch:
            bad.append(f"scratch {target} unencrypted")

    for target in store.host_mounts:
        if not any(re.fullmatch(p, target) for p in policy.flags.allow_host_device_mounts):
            bad.append(f"host mount {target} not permitted")

    if set(store.containers) != set(state.containers):
        bad.append("store and runtime container ids differ")
    for cid, inst in state.containers.items():
        entry = store.containers.get(cid)
        if entry is not None and tuple(inst.start_command) != tuple(entry.command):
            bad.append(f"container {cid} runs a different start command")
        pids = [p.pid for p in inst.processes]
        if len(pids) != len(set(pids)):
            bad.append(f"container {cid} has duplicate pids")

    for target, key in state.scratch_keys.items():
        if key != ERASED:
            bad.append(f"scratch key for {target} not erased")
    if set(state.scratch_devices) != set(store.scratch):
        bad.append("scratch devices and store disagree")
    for target, root in state.verity_mounts.items():
        if store.devices.get(target) != root.hex():
            bad.append(f"verity mount {target} root differs from store")
    return bad


def safety_oracle(state: UvmState) -> bool:
    return not safety_violations(state)
