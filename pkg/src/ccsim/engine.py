"""Default-deny enforcement of guest-agent actions against an execution policy.

``enforce`` is a pure function: it never mutates the store it is given.  An
allowed decision carries the metadata operations that produced the returned
store; a denied decision carries none and the returned store is the input
store object itself.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .policy import ContainerTemplate, EnvRule, ExecutionPolicy, ProcessRule, full_match


class Action(str, enum.Enum):
    MOUNT_DEVICE = "mount_device"
    UNMOUNT_DEVICE = "unmount_device"
    MOUNT_OVERLAY = "mount_overlay"
    UNMOUNT_OVERLAY = "unmount_overlay"
    CREATE_CONTAINER = "create_container"
    EXEC_IN_CONTAINER = "exec_in_container"
    EXEC_EXTERNAL = "exec_external"
    SHUTDOWN_CONTAINER = "shutdown_container"
    SIGNAL_PROCESS = "signal_process"
    MOUNT_HOST_DEVICE = "mount_host_device"
    UNMOUNT_HOST_DEVICE = "unmount_host_device"
    MOUNT_SCRATCH = "mount_scratch"
    UNMOUNT_SCRATCH = "unmount_scratch"
    GET_PROPERTIES = "get_properties"
    DUMP_STACKS = "dump_stacks"
    RUNTIME_LOGGING = "runtime_logging"
    CONTAINER_LOGGING = "container_logging"


class Deny:
    """Stable deny reasons."""

    MALFORMED = "malformed"
    METADATA_CONFLICT = "metadata conflict"
    UNKNOWN_ACTION = "unknown action"
    TARGET_IN_USE = "target in use"
    HASH_NOT_IN_POLICY = "device hash not in policy"
    NOT_MOUNTED = "not mounted"
    UNKNOWN_LAYER_PATH = "unknown layer path"
    LAYERS_NOT_IN_POLICY = "layer order not in policy"
    OVERLAY_EXISTS = "overlay id in use"
    UNKNOWN_OVERLAY = "unknown overlay"
    CONTAINER_EXISTS = "container id in use"
    UNKNOWN_CONTAINER = "unknown container"
    NO_MATCHING_TEMPLATE = "no matching template"
    NO_MATCHING_PROCESS = "no matching process rule"
    SIGNAL_NOT_ALLOWED = "signal not allowed"
    COMMAND_NOT_RUNNING = "command not running in container"
    FLAG_DISABLED = "disabled by policy flag"
    UNENCRYPTED_SCRATCH = "unencrypted scratch not allowed"
    HOST_MOUNT_NOT_ALLOWED = "host device mount not allowed"


@dataclass(frozen=True)
class OverlayEntry:
    layer_paths: tuple[str, ...]
    target: str
    candidates: frozenset[str]


@dataclass(frozen=True)
class ContainerEntry:
    candidates: frozenset[str]
    command: tuple[str, ...]
    env: tuple[str, ...]
    exec_commands: tuple[tuple[str, ...], ...] = ()


@dataclass(frozen=True)
class MetadataStore:
    """Policy-maintained state. Treat as immutable; use ``apply_ops`` to derive new stores."""

    devices: Mapping[str, str] = field(default_factory=dict)
    overlays: Mapping[str, OverlayEntry] = field(default_factory=dict)
    containers: Mapping[str, ContainerEntry] = field(default_factory=dict)
    scratch: Mapping[str, bool] = field(default_factory=dict)
    host_mounts: frozenset[str] = frozenset()


SECTIONS = ("devices", "overlays", "containers", "scratch", "host_mounts")


@dataclass(frozen=True)
class MetadataOp:
    name: str
    action: str  # add | update | remove
    key: str
    value: Any = None


class MetadataConflict(Exception):
    pass


def apply_ops(store: MetadataStore, ops: list[MetadataOp]) -> MetadataStore:
    """Apply ops to a copy of ``store``; raise MetadataConflict on a bad key."""
    sections: dict[str, Any] = {}
    for op in ops:
        if op.name not in SECTIONS:
            raise MetadataConflict(f"unknown section {op.name!r}")
        if op.name not in sections:
            cur = getattr(store, op.name)
            sections[op.name] = set(cur) if op.name == "host_mounts" else dict(cur)
        sec = sections[op.name]
        present = op.key in sec
        if op.action == "add":
            if present:
                raise MetadataConflict(f"{op.name}[{op.key!r}] exists")
        elif op.action in ("update", "remove"):
            if not present:
                raise MetadataConflict(f"{op.name}[{op.key!r}] absent")
        else:
            raise MetadataConflict(f"unknown action {op.action!r}")
        if op.action == "remove":
            sec.remove(op.key) if isinstance(sec, set) else sec.pop(op.key)
        elif isinstance(sec, set):
            sec.add(op.key)
        else:
            sec[op.key] = op.value
    return MetadataStore(
        devices=sections.get("devices", store.devices),
        overlays=sections.get("overlays", store.overlays),
        containers=sections.get("containers", store.containers),
        scratch=sections.get("scratch", store.scratch),
        host_mounts=frozenset(sections["host_mounts"]) if "host_mounts" in sections else store.host_mounts,
    )


@dataclass(frozen=True)
class EnforcementRequest:
    action: str
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class EnforcementDecision:
    allowed: bool
    metadata_ops: tuple[MetadataOp, ...] = ()
    deny_reason: str | None = None

    @classmethod
    def allow(cls, *ops: MetadataOp) -> "EnforcementDecision":
        return cls(True, tuple(ops), None)

    @classmethod
    def deny(cls, reason: str) -> "EnforcementDecision":
        return cls(False, (), reason)


# -- parameter schemas -----------------------------------------------------

_STR = "str"
_ABS = "abs"
_ARGV = "argv"
_ENV = "env"
_PATHS = "paths"
_INT = "int"
_BOOL = "bool"
_MOUNTS = "mounts"

SCHEMAS: dict[str, dict[str, str]] = {
    "mount_device": {"device_hash": _STR, "target": _ABS},
    "unmount_device": {"target": _ABS},
    "mount_overlay": {"overlay_id": _STR, "layer_paths": _PATHS, "target": _ABS},
    "unmount_overlay": {"target": _ABS},
    "create_container": {
        "container_id": _STR, "overlay_id": _STR, "command": _ARGV, "env": _ENV,
        "working_dir": _ABS, "mounts": _MOUNTS,
    },
    "exec_in_container": {"container_id": _STR, "command": _ARGV, "env": _ENV, "working_dir": _ABS},
    "exec_external": {"command": _ARGV, "env": _ENV, "working_dir": _ABS},
    "shutdown_container": {"container_id": _STR},
    "signal_process": {"container_id": _STR, "signal": _INT, "command": _ARGV},
    "mount_host_device": {"target": _ABS},
    "unmount_host_device": {"target": _ABS},
    "mount_scratch": {"target": _ABS, "encrypted": _BOOL},
    "unmount_scratch": {"target": _ABS},
    "get_properties": {},
    "dump_stacks": {},
    "runtime_logging": {},
    "container_logging": {},
}

_MOUNT_KEYS = {"source", "destination", "type", "options"}


def _is_str_list(v: Any) -> bool:
    return isinstance(v, (list, tuple)) and all(isinstance(s, str) for s in v)


def _valid(kind: str, v: Any) -> bool:
    if kind == _STR:
        return isinstance(v, str) and v != ""
    if kind == _ABS:
        return isinstance(v, str) and v.startswith("/")
    if kind == _ARGV:
        return _is_str_list(v) and len(v) > 0
    if kind == _ENV:
        return _is_str_list(v) and all("=" in s for s in v)
    if kind == _PATHS:
        return _is_str_list(v) and len(v) > 0 and all(s.startswith("/") for s in v)
    if kind == _INT:
        return isinstance(v, int) and not isinstance(v, bool)
    if kind == _BOOL:
        return isinstance(v, bool)
    if kind == _MOUNTS:
        return isinstance(v, (list, tuple)) and all(
            isinstance(m, Mapping)
            and set(m) == _MOUNT_KEYS
            and all(isinstance(m[k], str) for k in ("source", "destination", "type"))
            and _is_str_list(m["options"])
            for m in v
        )
    raise AssertionError(kind)


def validate_params(action: str, params: Any) -> bool:
    schema = SCHEMAS.get(action)
    if schema is None or not isinstance(params, Mapping):
        return False
    if set(params) != set(schema):
        return False
    return all(_valid(kind, params[k]) for k, kind in schema.items())


# -- matching helpers ----------------------------------------------------------


def env_allowed(env: Any, rules: tuple[EnvRule, ...]) -> bool:
    return all(any(r.matches(var) for r in rules) for var in env)


def process_matches(rule: ProcessRule, command, env, working_dir) -> bool:
    return (
        tuple(command) == rule.command
        and working_dir == rule.working_dir
        and env_allowed(env, rule.env_rules)
    )


def mounts_allowed(mounts, template: ContainerTemplate) -> bool:
    return all(
        any(r.matches(m["source"], m["destination"], m["type"], m["options"]) for r in template.mounts)
        for m in mounts
    )


# -- rules -------------------------------------------------------------------------


def rule_mount_device(policy: ExecutionPolicy, store: MetadataStore, p) -> EnforcementDecision:
    if p["target"] in store.devices:
        return EnforcementDecision.deny(Deny.TARGET_IN_USE)
    if not any(p["device_hash"] in t.layers for t in policy.containers):
        return EnforcementDecision.deny(Deny.HASH_NOT_IN_POLICY)
    return EnforcementDecision.allow(MetadataOp("devices", "add", p["target"], p["device_hash"]))


def rule_unmount_device(policy, store, p) -> EnforcementDecision:
    if p["target"] not in store.devices:
        return EnforcementDecision.deny(Deny.NOT_MOUNTED)
    return EnforcementDecision.allow(MetadataOp("devices", "remove", p["target"]))


def rule_mount_overlay(policy, store, p) -> EnforcementDecision:
    if p["overlay_id"] in store.overlays:
        return EnforcementDecision.deny(Deny.OVERLAY_EXISTS)
    if any(o.target == p["target"] for o in store.overlays.values()):
        return EnforcementDecision.deny(Deny.TARGET_IN_USE)
    digests = []
    for path in p["layer_paths"]:
        if path not in store.devices:
            return EnforcementDecision.deny(Deny.UNKNOWN_LAYER_PATH)
        digests.append(store.devices[path])
    digests = tuple(digests)
    candidates = frozenset(t.id for t in policy.containers if t.layers == digests)
    if not candidates:
        return EnforcementDecision.deny(Deny.LAYERS_NOT_IN_POLICY)
    entry = OverlayEntry(tuple(p["layer_paths"]), p["target"], candidates)
    return EnforcementDecision.allow(MetadataOp("overlays", "add", p["overlay_id"], entry))


def rule_unmount_overlay(policy, store, p) -> EnforcementDecision:
    for oid, entry in store.overlays.items():
        if entry.target == p["target"]:
            return EnforcementDecision.allow(MetadataOp("overlays", "remove", oid))
    return EnforcementDecision.deny(Deny.NOT_MOUNTED)


def rule_create_container(policy, store, p) -> EnforcementDecision:
    overlay = store.overlays.get(p["overlay_id"])
    if overlay is None:
        return EnforcementDecision.deny(Deny.UNKNOWN_OVERLAY)
    if p["container_id"] in store.containers:
        return EnforcementDecision.deny(Deny.CONTAINER_EXISTS)
    command = tuple(p["command"])
    narrowed = frozenset(
        t.id
        for t in policy.containers
        if t.id in overlay.candidates
        and t.command == command
        and t.working_dir == p["working_dir"]
        and env_allowed(p["env"], t.env_rules)
        and mounts_allowed(p["mounts"], t)
    )
    if not narrowed:
        return EnforcementDecision.deny(Deny.NO_MATCHING_TEMPLATE)
    entry = ContainerEntry(narrowed, command, tuple(p["env"]))
    return EnforcementDecision.allow(MetadataOp("containers", "add", p["container_id"], entry))


def rule_exec_in_container(policy, store, p) -> EnforcementDecision:
    entry = store.containers.get(p["container_id"])
    if entry is None:
        return EnforcementDecision.deny(Deny.UNKNOWN_CONTAINER)
    narrowed = frozenset(
        t.id
        for t in policy.containers
        if t.id in entry.candidates
        and any(process_matches(r, p["command"], p["env"], p["working_dir"]) for r in t.exec_processes)
    )
    if not narrowed:
        return EnforcementDecision.deny(Deny.NO_MATCHING_PROCESS)
    command = tuple(p["command"])
    execs = entry.exec_commands if command in entry.exec_commands else entry.exec_commands + (command,)
    updated = ContainerEntry(narrowed, entry.command, entry.env, execs)
    return EnforcementDecision.allow(MetadataOp("containers", "update", p["container_id"], updated))


def rule_exec_external(policy, store, p) -> EnforcementDecision:
    if any(process_matches(r, p["command"], p["env"], p["working_dir"]) for r in policy.external_processes):
        return EnforcementDecision.allow()
    return EnforcementDecision.deny(Deny.NO_MATCHING_PROCESS)


def rule_signal_process(policy, store, p) -> EnforcementDecision:
    entry = store.containers.get(p["container_id"])
    if entry is None:
        return EnforcementDecision.deny(Deny.UNKNOWN_CONTAINER)
    command = tuple(p["command"])
    if command != entry.command and command not in entry.exec_commands:
        return EnforcementDecision.deny(Deny.COMMAND_NOT_RUNNING)
    if not any(p["signal"] in t.signals for t in policy.containers if t.id in entry.candidates):
        return EnforcementDecision.deny(Deny.SIGNAL_NOT_ALLOWED)
    return EnforcementDecision.allow()


def _remove_rule(section: str, key_param: str):
    def rule(policy, store, p) -> EnforcementDecision:
        key = p[key_param]
        if key not in getattr(store, section):
            if section == "containers":
                return EnforcementDecision.deny(Deny.UNKNOWN_CONTAINER)
            return EnforcementDecision.deny(Deny.NOT_MOUNTED)
        return EnforcementDecision.allow(MetadataOp(section, "remove", key))

    rule.__name__ = f"rule_remove_{section}"
    return rule


rule_shutdown_container = _remove_rule("containers", "container_id")
rule_unmount_host_device = _remove_rule("host_mounts", "target")
rule_unmount_scratch = _remove_rule("scratch", "target")


def rule_mount_host_device(policy, store, p) -> EnforcementDecision:
    if p["target"] in store.host_mounts:
        return EnforcementDecision.deny(Deny.TARGET_IN_USE)
    if not any(full_match(pat, p["target"]) for pat in policy.flags.allow_host_device_mounts):
        return EnforcementDecision.deny(Deny.HOST_MOUNT_NOT_ALLOWED)
    return EnforcementDecision.allow(MetadataOp("host_mounts", "add", p["target"]))


def rule_mount_scratch(policy, store, p) -> EnforcementDecision:
    if p["target"] in store.scratch:
        return EnforcementDecision.deny(Deny.TARGET_IN_USE)
    if not p["encrypted"] and not policy.flags.allow_unencrypted_scratch:
        return EnforcementDecision.deny(Deny.UNENCRYPTED_SCRATCH)
    return EnforcementDecision.allow(MetadataOp("scratch", "add", p["target"], p["encrypted"]))


_FLAG_FOR_ACTION = {
    "get_properties": "allow_properties_access",
    "dump_stacks": "allow_dump_stacks",
    "runtime_logging": "allow_runtime_logging",
    "container_logging": "allow_container_logging",
}


def rule_flag_gated(policy: ExecutionPolicy, action: str) -> EnforcementDecision:
    if getattr(policy.flags, _FLAG_FOR_ACTION[action]):
        return EnforcementDecision.allow()
    return EnforcementDecision.deny(Deny.FLAG_DISABLED)


RULES: dict[str, Callable[[ExecutionPolicy, MetadataStore, Mapping], EnforcementDecision]] = {
    "mount_device": rule_mount_device,
    "unmount_device": rule_unmount_device,
    "mount_overlay": rule_mount_overlay,
    "unmount_overlay": rule_unmount_overlay,
    "create_container": rule_create_container,
    "exec_in_container": rule_exec_in_container,
    "exec_external": rule_exec_external,
    "shutdown_container": rule_shutdown_container,
    "signal_process": rule_signal_process,
    "mount_host_device": rule_mount_host_device,
    "unmount_host_device": rule_unmount_host_device,
    "mount_scratch": rule_mount_scratch,
    "unmount_scratch": rule_unmount_scratch,
}
for _a in _FLAG_FOR_ACTION:
    RULES[_a] = lambda policy, store, p, _a=_a: rule_flag_gated(policy, _a)

assert set(RULES) == {a.value for a in Action} == set(SCHEMAS)


def enforce(
    policy: ExecutionPolicy, store: MetadataStore, request: EnforcementRequest
) -> tuple[EnforcementDecision, MetadataStore]:
    """Decide ``request`` and return the decision with the resulting store."""
    action = request.action.value if isinstance(request.action, Action) else request.action
    if action not in RULES:
        return EnforcementDecision.deny(Deny.UNKNOWN_ACTION), store
    if not validate_params(action, request.params):
        return EnforcementDecision.deny(Deny.MALFORMED), store
    decision = RULES[action](policy, store, request.params)
    if not decision.allowed:
        return decision, store
    try:
        new_store = apply_ops(store, list(decision.metadata_ops))
    except MetadataConflict:
        return EnforcementDecision.deny(Deny.METADATA_CONFLICT), store
    return decision, new_store
