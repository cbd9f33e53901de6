"""Execution policy documents: parsing, validation, canonical encoding and measurement.

A policy is a JSON document (extension ``.polj``) with four top-level keys::

    {
      "version": 1,
      "containers": [ContainerTemplate, ...],
      "external_processes": [ProcessRule, ...],
      "flags": PolicyFlags
    }

Everything omitted is filled with its default before canonicalization, so two
documents that differ only in key order, whitespace or explicit defaults
measure identically.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable

HEX_DIGEST = re.compile(r"[0-9a-f]{64}")

LITERAL = "literal"
REGEX = "regex"
STRATEGIES = (LITERAL, REGEX)

# Constructs RE2 does not support; rejected so patterns keep linear-time,
# engine-independent semantics.
_UNSUPPORTED_REGEX = [
    (re.compile(r"\\[1-9]"), "backreference"),
    (re.compile(r"\(\?P="), "named backreference"),
    (re.compile(r"\(\?[=!]"), "lookahead"),
    (re.compile(r"\(\?<[=!]"), "lookbehind"),
    (re.compile(r"\(\?\("), "conditional"),
    (re.compile(r"\(\?[aiLmsux-]+[:)]"), "inline flags"),
]


class PolicyError(ValueError):
    """Base class for policy document errors."""


class PolicySyntaxError(PolicyError):
    def __init__(self, msg: str, lineno: int, colno: int, pos: int):
        super().__init__(f"{msg} (line {lineno}, column {colno})")
        self.lineno = lineno
        self.colno = colno
        self.pos = pos


class PolicySemanticError(PolicyError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


def compile_pattern(pattern: str) -> re.Pattern:
    """Compile a full-match pattern in the supported dialect, or raise ValueError."""
    for probe, what in _UNSUPPORTED_REGEX:
        if probe.search(pattern):
            raise ValueError(f"unsupported regex construct ({what})")
    try:
        return re.compile(pattern)
    except re.error as exc:
        raise ValueError(f"invalid regex: {exc}") from None


_PATTERN_CACHE: dict[str, re.Pattern] = {}


def full_match(pattern: str, value: str) -> bool:
    compiled = _PATTERN_CACHE.get(pattern)
    if compiled is None:
        compiled = _PATTERN_CACHE[pattern] = compile_pattern(pattern)
    return compiled.fullmatch(value) is not None


@dataclass(frozen=True)
class EnvRule:
    pattern: str
    strategy: str = LITERAL

    def matches(self, var: str) -> bool:
        if self.strategy == LITERAL:
            return var == self.pattern
        return full_match(self.pattern, var)


@dataclass(frozen=True)
class MountRule:
    source: str
    destination: str
    type: str = "bind"
    options: tuple[str, ...] = ()

    def matches(self, source: str, destination: str, type_: str, options: Iterable[str]) -> bool:
        return (
            destination == self.destination
            and type_ == self.type
            and sorted(options) == list(self.options)
            and full_match(self.source, source)
        )


@dataclass(frozen=True)
class ProcessRule:
    command: tuple[str, ...]
    env_rules: tuple[EnvRule, ...] = ()
    working_dir: str = "/"


@dataclass(frozen=True)
class ContainerTemplate:
    id: str
    layers: tuple[str, ...]
    command: tuple[str, ...]
    env_rules: tuple[EnvRule, ...] = ()
    working_dir: str = "/"
    mounts: tuple[MountRule, ...] = ()
    exec_processes: tuple[ProcessRule, ...] = ()
    signals: tuple[int, ...] = ()
    allow_stdio_access: bool = False


@dataclass(frozen=True)
class PolicyFlags:
    allow_properties_access: bool = False
    allow_dump_stacks: bool = False
    allow_runtime_logging: bool = False
    allow_container_logging: bool = False
    allow_unencrypted_scratch: bool = False
    allow_host_device_mounts: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExecutionPolicy:
    version: int = 1
    containers: tuple[ContainerTemplate, ...] = ()
    external_processes: tuple[ProcessRule, ...] = ()
    flags: PolicyFlags = field(default_factory=PolicyFlags)

    def template(self, template_id: str) -> ContainerTemplate:
        for t in self.containers:
            if t.id == template_id:
                return t
        raise KeyError(template_id)

    @property
    def all_layers(self) -> frozenset[str]:
        return frozenset(h for t in self.containers for h in t.layers)


@dataclass(frozen=True)
class PolicyMeasurement:
    digest: bytes

    @property
    def host_data(self) -> bytes:
        """The 32 bytes that fit the report's host-data field."""
        return self.digest[:32]

    def hex(self) -> str:
        return self.digest.hex()


# -- dict <-> dataclass ------------------------------------------------------


class _Reader:
    """Typed accessors over a JSON object that report the offending path."""

    def __init__(self, obj: Any, path: str, known: Iterable[str]):
        if not isinstance(obj, dict):
            raise PolicySemanticError(path, "expected an object")
        unknown = sorted(set(obj) - set(known))
        if unknown:
            raise PolicySemanticError(path, f"unknown key(s) {unknown}")
        self.obj = obj
        self.path = path

    def _get(self, key, default, required):
        if key not in self.obj:
            if required:
                raise PolicySemanticError(self.path, f"missing required key {key!r}")
            return default
        return self.obj[key]

    def str(self, key, default=None, required=False) -> str:
        v = self._get(key, default, required)
        if not isinstance(v, str):
            raise PolicySemanticError(f"{self.path}.{key}", "expected a string")
        return v

    def bool(self, key, default=False) -> bool:
        v = self._get(key, default, False)
        if not isinstance(v, bool):
            raise PolicySemanticError(f"{self.path}.{key}", "expected a boolean")
        return v

    def int(self, key, default=None, required=False) -> int:
        v = self._get(key, default, required)
        if isinstance(v, bool) or not isinstance(v, int):
            raise PolicySemanticError(f"{self.path}.{key}", "expected an integer")
        return v

    def list(self, key, required=False) -> list:
        v = self._get(key, [], required)
        if not isinstance(v, list):
            raise PolicySemanticError(f"{self.path}.{key}", "expected a list")
        return v

    def str_list(self, key, required=False) -> tuple[str, ...]:
        items = self.list(key, required)
        for i, s in enumerate(items):
            if not isinstance(s, str):
                raise PolicySemanticError(f"{self.path}.{key}[{i}]", "expected a string")
        return tuple(items)


def _abs_path(path: str, value: str) -> str:
    if not value.startswith("/"):
        raise PolicySemanticError(path, f"expected an absolute path, got {value!r}")
    return value


def _env_rule(obj: Any, path: str) -> EnvRule:
    r = _Reader(obj, path, ("pattern", "strategy"))
    pattern = r.str("pattern", required=True)
    strategy = r.str("strategy", LITERAL)
    if strategy not in STRATEGIES:
        raise PolicySemanticError(f"{path}.strategy", f"must be one of {STRATEGIES}")
    if strategy == LITERAL:
        if pattern.count("=") != 1:
            raise PolicySemanticError(f"{path}.pattern", "literal env rule needs exactly one '='")
    else:
        try:
            compile_pattern(pattern)
        except ValueError as exc:
            raise PolicySemanticError(f"{path}.pattern", str(exc)) from None
    return EnvRule(pattern, strategy)


def _mount_rule(obj: Any, path: str) -> MountRule:
    r = _Reader(obj, path, ("source", "destination", "type", "options"))
    source = r.str("source", required=True)
    try:
        compile_pattern(source)
    except ValueError as exc:
        raise PolicySemanticError(f"{path}.source", str(exc)) from None
    return MountRule(
        source=source,
        destination=_abs_path(f"{path}.destination", r.str("destination", required=True)),
        type=r.str("type", "bind"),
        options=tuple(sorted(r.str_list("options"))),
    )


def _process_rule(obj: Any, path: str) -> ProcessRule:
    r = _Reader(obj, path, ("command", "env_rules", "working_dir"))
    command = r.str_list("command", required=True)
    if not command:
        raise PolicySemanticError(f"{path}.command", "must not be empty")
    return ProcessRule(
        command=command,
        env_rules=tuple(_env_rule(e, f"{path}.env_rules[{i}]") for i, e in enumerate(r.list("env_rules"))),
        working_dir=_abs_path(f"{path}.working_dir", r.str("working_dir", "/")),
    )


_TEMPLATE_KEYS = (
    "id", "layers", "command", "env_rules", "working_dir", "mounts",
    "exec_processes", "signals", "allow_stdio_access",
)


def _template(obj: Any, path: str) -> ContainerTemplate:
    r = _Reader(obj, path, _TEMPLATE_KEYS)
    layers = r.str_list("layers", required=True)
    if not layers:
        raise PolicySemanticError(f"{path}.layers", "must not be empty")
    for i, h in enumerate(layers):
        if not HEX_DIGEST.fullmatch(h):
            raise PolicySemanticError(
                f"{path}.layers[{i}]", "layer digest must be 64 lowercase hex characters"
            )
    signals = []
    for i, s in enumerate(r.list("signals")):
        if isinstance(s, bool) or not isinstance(s, int) or not 1 <= s <= 64:
            raise PolicySemanticError(f"{path}.signals[{i}]", "expected a signal number 1..64")
        signals.append(s)
    return ContainerTemplate(
        id=r.str("id", required=True),
        layers=layers,
        command=r.str_list("command", required=True),
        env_rules=tuple(_env_rule(e, f"{path}.env_rules[{i}]") for i, e in enumerate(r.list("env_rules"))),
        working_dir=_abs_path(f"{path}.working_dir", r.str("working_dir", "/")),
        mounts=tuple(_mount_rule(m, f"{path}.mounts[{i}]") for i, m in enumerate(r.list("mounts"))),
        exec_processes=tuple(
            _process_rule(p, f"{path}.exec_processes[{i}]") for i, p in enumerate(r.list("exec_processes"))
        ),
        signals=tuple(sorted(set(signals))),  # a set; canonical order
        allow_stdio_access=r.bool("allow_stdio_access"),
    )


def _flags(obj: Any, path: str) -> PolicyFlags:
    r = _Reader(obj, path, [f.name for f in PolicyFlags.__dataclass_fields__.values()])
    patterns = r.str_list("allow_host_device_mounts")
    for i, p in enumerate(patterns):
        try:
            compile_pattern(p)
        except ValueError as exc:
            raise PolicySemanticError(f"{path}.allow_host_device_mounts[{i}]", str(exc)) from None
    return PolicyFlags(
        allow_properties_access=r.bool("allow_properties_access"),
        allow_dump_stacks=r.bool("allow_dump_stacks"),
        allow_runtime_logging=r.bool("allow_runtime_logging"),
        allow_container_logging=r.bool("allow_container_logging"),
        allow_unencrypted_scratch=r.bool("allow_unencrypted_scratch"),
        allow_host_device_mounts=patterns,
    )


def _dedup_key(t: ContainerTemplate) -> tuple:
    return (t.layers, t.command, t.env_rules, t.working_dir, t.mounts)


def policy_from_dict(doc: Any) -> ExecutionPolicy:
    r = _Reader(doc, "$", ("version", "containers", "external_processes", "flags"))
    version = r.int("version", required=True)
    if version != 1:
        raise PolicySemanticError("$.version", f"unsupported version {version}")
    containers = tuple(_template(c, f"$.containers[{i}]") for i, c in enumerate(r.list("containers")))
    seen_ids: set[str] = set()
    seen_shapes: dict[tuple, str] = {}
    for i, t in enumerate(containers):
        if t.id in seen_ids:
            raise PolicySemanticError(f"$.containers[{i}].id", f"duplicate template id {t.id!r}")
        seen_ids.add(t.id)
        shape = _dedup_key(t)
        if shape in seen_shapes:
            raise PolicySemanticError(
                f"$.containers[{i}]", f"duplicates template {seen_shapes[shape]!r}"
            )
        seen_shapes[shape] = t.id
    return ExecutionPolicy(
        version=version,
        containers=containers,
        external_processes=tuple(
            _process_rule(p, f"$.external_processes[{i}]") for i, p in enumerate(r.list("external_processes"))
        ),
        flags=_flags(doc.get("flags", {}), "$.flags"),
    )


def _no_duplicate_keys(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ValueError(f"duplicate key {k!r}")
        out[k] = v
    return out


def parse_policy(text: str | bytes) -> ExecutionPolicy:
    """Parse a policy document, filling every default."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PolicySyntaxError(f"not UTF-8: {exc.reason}", 1, exc.start + 1, exc.start) from None
    try:
        doc = json.loads(text, object_pairs_hook=_no_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise PolicySyntaxError(exc.msg, exc.lineno, exc.colno, exc.pos) from None
    except ValueError as exc:
        raise PolicySyntaxError(str(exc), 1, 1, 0) from None
    return policy_from_dict(doc)


def _env_dict(e: EnvRule) -> dict:
    return {"pattern": e.pattern, "strategy": e.strategy}


def _process_dict(p: ProcessRule) -> dict:
    return {
        "command": list(p.command),
        "env_rules": [_env_dict(e) for e in p.env_rules],
        "working_dir": p.working_dir,
    }


def policy_to_dict(policy: ExecutionPolicy) -> dict:
    """Fully-defaulted plain-data form of a policy."""
    f = policy.flags
    return {
        "version": policy.version,
        "containers": [
            {
                "id": t.id,
                "layers": [h.lower() for h in t.layers],
                "command": list(t.command),
                "env_rules": [_env_dict(e) for e in t.env_rules],
                "working_dir": t.working_dir,
                "mounts": [
                    {"source": m.source, "destination": m.destination, "type": m.type,
                     "options": sorted(m.options)}
                    for m in t.mounts
                ],
                "exec_processes": [_process_dict(p) for p in t.exec_processes],
                "signals": list(t.signals),
                "allow_stdio_access": t.allow_stdio_access,
            }
            for t in policy.containers
        ],
        "external_processes": [_process_dict(p) for p in policy.external_processes],
        "flags": {
            "allow_properties_access": f.allow_properties_access,
            "allow_dump_stacks": f.allow_dump_stacks,
            "allow_runtime_logging": f.allow_runtime_logging,
            "allow_container_logging": f.allow_container_logging,
            "allow_unencrypted_scratch": f.allow_unencrypted_scratch,
            "allow_host_device_mounts": list(f.allow_host_device_mounts),
        },
    }


def render_policy(policy: ExecutionPolicy) -> str:
    """Human-friendly document text; parses back to an equal policy."""
    return json.dumps(policy_to_dict(policy), indent=2, ensure_ascii=False) + "\n"


def canonicalize(policy: ExecutionPolicy) -> bytes:
    # Keys are ASCII, so code-point order equals UTF-8 byte order.
    return json.dumps(
        policy_to_dict(policy), sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def measure_policy(policy: ExecutionPolicy) -> PolicyMeasurement:
    return PolicyMeasurement(hashlib.sha512(canonicalize(policy)).digest())


def load_policy(path) -> ExecutionPolicy:
    with open(path, "rb") as f:
        return parse_policy(f.read())
