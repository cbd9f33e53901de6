"""Simulated in-VM guest agent.

The agent owns a :class:`UvmState`, consults the policy engine before every
action and applies the outcome atomically: either the decision is allowed and
both the metadata store and the simulated side effect (device attach, scratch
format, container status change) are committed, or nothing but the decision
log changes.
"""

from __future__ import annotations

import copy
import functools
import json
import os
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping

from . import storage
from .engine import EnforcementRequest, MetadataStore, enforce
from .policy import ExecutionPolicy, measure_policy, parse_policy
from .storage import IntegrityError, VerityImage, scratch_format

ERASED = "erased"
SCRATCH_SECTORS = 8
TERMINATING_SIGNALS = frozenset({2, 9, 15})


class GuestFault(Exception):
    """Unrecoverable guest condition; the agent refuses further work."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


class OperationalFailure(Exception):
    """An allowed action whose side effect failed; the transition is rolled back."""


@dataclass
class Process:
    pid: int
    command: tuple[str, ...]
    status: str = "running"


@dataclass
class ContainerInstance:
    id: str
    status: str  # created | running | exited
    start_command: tuple[str, ...]
    processes: list[Process] = field(default_factory=list)


@dataclass(frozen=True)
class LogEntry:
    seq: int
    action: str
    allowed: bool
    reason: str | None


@dataclass
class UvmState:
    policy: ExecutionPolicy
    store: MetadataStore = field(default_factory=MetadataStore)
    containers: dict[str, ContainerInstance] = field(default_factory=dict)
    scratch_keys: dict[str, Any] = field(default_factory=dict)
    scratch_devices: dict[str, Any] = field(default_factory=dict)
    verity_mounts: dict[str, bytes] = field(default_factory=dict)
    external_processes: list[Process] = field(default_factory=list)
    next_pid: int = 1
    log: list[LogEntry] = field(default_factory=list)


@dataclass(frozen=True)
class Response:
    allowed: bool
    deny_reason: str | None = None
    data: Mapping[str, Any] = field(default_factory=dict)


def initial_state(policy: ExecutionPolicy) -> UvmState:
    return UvmState(policy=policy)


def _clone(state: UvmState) -> UvmState:
    # The log list is shared on purpose: it is append-only and outside the
    # atomicity contract.
    return replace(
        state,
        containers=copy.deepcopy(state.containers),
        scratch_keys=dict(state.scratch_keys),
        scratch_devices=dict(state.scratch_devices),
        verity_mounts=dict(state.verity_mounts),
        external_processes=list(state.external_processes),
    )


def _attach_verity(disks: Mapping[str, VerityImage] | None, device_hash: str) -> bytes:
    root = bytes.fromhex(device_hash)
    image = disks.get(device_hash)
    if image is None:
        raise OperationalFailure("storage: device unavailable")
    try:
        storage.verify_tree_root(image, root)
        for i in range(image.block_count):
            storage.verified_read(image, i, root)
    except IntegrityError as exc:
        raise OperationalFailure(f"storage: integrity violation ({exc})") from None
    return root


def _side_effect(state: UvmState, action: str, p: Mapping[str, Any], disks, key_source) -> dict:
    """Perform the simulated effect of an allowed action on ``state`` (a private copy)."""
    if action == "mount_device":
        if disks is not None:
            state.verity_mounts[p["target"]] = _attach_verity(disks, p["device_hash"])
    elif action == "unmount_device":
        state.verity_mounts.pop(p["target"], None)
    elif action == "mount_scratch":
        if p["encrypted"]:
            key = key_source()
            state.scratch_keys[p["target"]] = key
            dev, _ = scratch_format(SCRATCH_SECTORS, key=key)
            state.scratch_devices[p["target"]] = dev
            state.scratch_keys[p["target"]] = ERASED
        else:
            state.scratch_devices[p["target"]] = None
    elif action == "unmount_scratch":
        state.scratch_devices.pop(p["target"], None)
        state.scratch_keys.pop(p["target"], None)
    elif action == "create_container":
        command = tuple(p["command"])
        inst = ContainerInstance(p["container_id"], "created", command)
        inst.processes.append(Process(state.next_pid, command))
        state.next_pid += 1
        inst.status = "running"
        state.containers[p["container_id"]] = inst
        return {"pid": inst.processes[0].pid}
    elif action == "exec_in_container":
        inst = state.containers[p["container_id"]]
        if inst.status != "running":
            raise OperationalFailure("runtime: container not running")
        proc = Process(state.next_pid, tuple(p["command"]))
        state.next_pid += 1
        inst.processes.append(proc)
        return {"pid": proc.pid}
    elif action == "exec_external":
        proc = Process(state.next_pid, tuple(p["command"]))
        state.next_pid += 1
        state.external_processes.append(proc)
        return {"pid": proc.pid}
    elif action == "signal_process":
        inst = state.containers[p["container_id"]]
        command = tuple(p["command"])
        hit = [pr for pr in inst.processes if pr.command == command and pr.status == "running"]
        if p["signal"] in TERMINATING_SIGNALS:
            for pr in hit:
                pr.status = "exited"
            if inst.processes and inst.processes[0].status == "exited":
                inst.status = "exited"
        return {"signalled": [pr.pid for pr in hit]}
    elif action == "shutdown_container":
        del state.containers[p["container_id"]]
    elif action == "get_properties":
        return {"containers": sorted(state.containers), "pids": state.next_pid - 1}
    elif action == "dump_stacks":
        return {"stacks": {cid: [pr.pid for pr in c.processes] for cid, c in sorted(state.containers.items())}}
    return {}


def _check_consistency(state: UvmState) -> None:
    if set(state.store.containers) != set(state.containers):
        raise GuestFault("state-divergence", "store and runtime disagree on container ids")


def handle_request(
    state: UvmState,
    request: EnforcementRequest,
    disks: Mapping[str, VerityImage] | None = None,
    key_source: Callable[[], bytes] = lambda: os.urandom(32),
) -> tuple[Response, UvmState]:
    """Enforce and, when allowed, apply one request. ``state`` itself is never modified
    apart from its shared, append-only log."""
    decision, store = enforce(state.policy, state.store, request)
    action = getattr(request.action, "value", request.action)
    seq = len(state.log) + 1
    if not decision.allowed:
        state.log.append(LogEntry(seq, str(action), False, decision.deny_reason))
        return Response(False, decision.deny_reason), state
    new = _clone(state)
    new.store = store
    try:
        data = _side_effect(new, action, request.params, disks, key_source)
    except OperationalFailure as exc:
        state.log.append(LogEntry(seq, action, False, str(exc)))
        return Response(False, str(exc)), state
    _check_consistency(new)
    new.log.append(LogEntry(seq, action, True, None))
    return Response(True, None, data), new


def _json_default(o):
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if isinstance(o, bytes):
        return o.hex()
    raise TypeError(type(o))


@functools.lru_cache(maxsize=64)
def _policy_hex(policy: ExecutionPolicy) -> str:
    return measure_policy(policy).hex()


def snapshot(state: UvmState, include_log: bool = False) -> bytes:
    """Deterministic encoding of the security-relevant state."""
    st = state.store
    doc = {
        "policy": _policy_hex(state.policy),
        "store": {
            "devices": dict(st.devices),
            "overlays": {
                k: {"layer_paths": list(v.layer_paths), "target": v.target, "candidates": sorted(v.candidates)}
                for k, v in st.overlays.items()
            },
            "containers": {
                k: {"candidates": sorted(v.candidates), "command": list(v.command), "env": list(v.env),
                    "exec_commands": [list(c) for c in v.exec_commands]}
                for k, v in st.containers.items()
            },
            "scratch": dict(st.scratch),
            "host_mounts": sorted(st.host_mounts),
        },
        "containers": {
            k: {"status": c.status, "start_command": list(c.start_command),
                "processes": [[p.pid, list(p.command), p.status] for p in c.processes]}
            for k, c in state.containers.items()
        },
        "scratch_keys": {k: (v if v == ERASED else "present") for k, v in state.scratch_keys.items()},
        "scratch_devices": sorted(state.scratch_devices),
        "verity_mounts": state.verity_mounts,
        "external_processes": [[p.pid, list(p.command), p.status] for p in state.external_processes],
        "next_pid": state.next_pid,
    }
    if include_log:
        doc["log"] = [[e.seq, e.action, e.allowed, e.reason] for e in state.log]
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), default=_json_default).encode()


class GuestAgent:
    """Single owner of a UvmState; serializes requests from any number of callers."""

    def __init__(
        self,
        policy: ExecutionPolicy,
        disks: Mapping[str, VerityImage] | None = None,
        key_source: Callable[[], bytes] | None = None,
    ):
        self.state = initial_state(policy)
        self.disks = disks
        self.key_source = key_source or (lambda: os.urandom(32))
        self.fault: GuestFault | None = None
        self._lock = threading.Lock()

    @classmethod
    def boot(cls, policy_doc: str | bytes, host_data: bytes | None, **kwargs) -> "GuestAgent":
        """Parse the delivered policy and check it against the launch host data."""
        policy = parse_policy(policy_doc)
        if host_data is not None and measure_policy(policy).host_data != bytes(host_data):
            raise GuestFault("policy-measurement-mismatch", "delivered policy does not match host data")
        return cls(policy, **kwargs)

    @property
    def policy(self) -> ExecutionPolicy:
        return self.state.policy

    def handle(self, request: EnforcementRequest) -> Response:
        with self._lock:
            if self.fault is not None:
                return Response(False, f"fault: {self.fault.code}")
            try:
                response, self.state = handle_request(self.state, request, self.disks, self.key_source)
            except GuestFault as fault:
                self.fault = fault
                raise
            return response

    def snapshot(self, include_log: bool = False) -> bytes:
        with self._lock:
            return snapshot(self.state, include_log)
