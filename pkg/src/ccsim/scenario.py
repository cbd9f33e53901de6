"""Adversarial scenarios: scripted host behaviour replayed against a guest.

A scenario file (``.scn``) is JSON::

    {
      "name": "overlay-layer-order",
      "description": "...",
      "threats": ["overlay-layers", ...],
      "policy": { ...policy document... },
      "disks": {"<root hex>": {"seed": "base", "blocks": 2}},      # optional
      "requests": {"mount_base": {"action": "mount_device", "params": {...}}},
      "steps": [
        {"base": "mount_base", "expect": "allow"},
        {"base": "mount_base", "mutation": {"operator": "replay_request"}, "expect": "deny"},
        {"request": {"action": "dump_stacks", "params": {}}, "expect": "deny"}
      ]
    }

``disks`` describes the block devices the host attaches: deterministic layer
contents derived from ``seed``; ``corrupt_block`` flips a data byte after the
tree is built, modelling host tampering with a device.  Without ``disks`` the
guest skips storage attach and only the policy is exercised.

A dropped request is never delivered; it scores as ``deny`` and the runner
checks that the guest state did not move.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import storage
from .guest import GuestAgent
from .policy import measure_policy, parse_policy
from .wire import GuestEndpoint, InProcessTransport, TransportError, dumps, frame_body

OPERATORS = (
    "swap_layer_order",
    "inject_rogue_layer_hash",
    "alter_env",
    "alter_command",
    "alter_mount_destination",
    "replay_request",
    "drop_request",
    "reorder_requests",
    "tamper_payload_byte",
)

ROGUE_HASH = hashlib.sha256(b"rogue layer").hexdigest()
CORPUS_DIR = Path(__file__).with_name("corpus")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Mutation:
    operator: str
    operands: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Step:
    expect: str
    request: dict | None = None
    base: str | None = None
    mutation: Mutation | None = None

    @property
    def label(self) -> str:
        name = self.base or (self.request or {}).get("action", "?")
        return f"{name}+{self.mutation.operator}" if self.mutation else name


@dataclass
class Scenario:
    name: str
    policy: dict
    steps: list[Step]
    requests: dict[str, dict] = field(default_factory=dict)
    disks: dict | None = None
    threats: list[str] = field(default_factory=list)
    description: str = ""

    @property
    def operators(self) -> set[str]:
        return {s.mutation.operator for s in self.steps if s.mutation}


def _request_literal(obj: Any, where: str) -> dict:
    if not isinstance(obj, dict) or set(obj) != {"action", "params"} or not isinstance(obj["action"], str):
        raise ScenarioError(f"{where}: request must be {{action, params}}")
    return obj


def scenario_from_dict(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be an object")
    try:
        parse_policy(json.dumps(doc["policy"]))
    except KeyError:
        raise ScenarioError("scenario has no policy") from None
    except ValueError as exc:
        raise ScenarioError(f"policy: {exc}") from None
    requests = {k: _request_literal(v, f"requests.{k}") for k, v in doc.get("requests", {}).items()}
    steps = []
    for i, s in enumerate(doc.get("steps", [])):
        where = f"steps[{i}]"
        if s.get("expect") not in ("allow", "deny"):
            raise ScenarioError(f"{where}: expect must be 'allow' or 'deny'")
        mutation = None
        if "mutation" in s:
            m = s["mutation"]
            if m.get("operator") not in OPERATORS:
                raise ScenarioError(f"{where}: unknown operator {m.get('operator')!r}")
            mutation = Mutation(m["operator"], dict(m.get("operands", {})))
        if ("request" in s) == ("base" in s):
            raise ScenarioError(f"{where}: exactly one of 'request' or 'base' is required")
        if "base" in s and s["base"] not in requests:
            raise ScenarioError(f"{where}: unknown base request {s['base']!r}")
        steps.append(Step(
            expect=s["expect"],
            request=_request_literal(s["request"], where) if "request" in s else None,
            base=s.get("base"),
            mutation=mutation,
        ))
    if not steps:
        raise ScenarioError("scenario has no steps")
    return Scenario(
        name=str(doc.get("name", "unnamed")),
        policy=doc["policy"],
        steps=steps,
        requests=requests,
        disks=doc.get("disks"),
        threats=list(doc.get("threats", [])),
        description=str(doc.get("description", "")),
    )


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: {exc}") from None
    return scenario_from_dict(doc)


def corpus_paths(directory=CORPUS_DIR) -> list[Path]:
    return sorted(Path(directory).glob("*.scn"))


def load_coverage(directory=CORPUS_DIR) -> dict:
    with open(Path(directory) / "coverage.json", encoding="utf-8") as f:
        return json.load(f)


# -- disks ------------------------------------------------------------------------


def layer_bytes(seed: str, blocks: int) -> bytes:
    return hashlib.shake_256(seed.encode()).digest(blocks * storage.BLOCK_SIZE)


def layer_image(seed: str, blocks: int, corrupt_block: int | None = None) -> storage.VerityImage:
    image = storage.build_tree(layer_bytes(seed, blocks))
    if corrupt_block is not None:
        data = bytearray(image.data)
        data[corrupt_block * storage.BLOCK_SIZE + 17] ^= 0x40
        image.data = bytes(data)
    return image


def build_disks(spec: dict | None) -> dict[str, storage.VerityImage] | None:
    """Map claimed root hash -> the image the host actually attaches."""
    if spec is None:
        return None
    return {
        root: layer_image(d["seed"], int(d["blocks"]), d.get("corrupt_block"))
        for root, d in spec.items()
    }


# -- mutations ------------------------------------------------------------------------


@dataclass(frozen=True)
class Delivery:
    kind: str  # send | raw | drop
    action: str = ""
    payload: dict | None = None
    tamper: tuple[int, int] | None = None


def apply_mutation(request: dict, mutation: Mutation | None) -> Delivery:
    """Turn a base request plus an adversary mutation into what the host delivers."""
    action = request["action"]
    params = copy.deepcopy(request["params"])
    if mutation is None:
        return Delivery("send", action, params)
    op, ops = mutation.operator, mutation.operands
    if op in ("replay_request", "reorder_requests"):
        # The position of the step in the script is the reordering/replay.
        return Delivery("send", action, params)
    if op == "drop_request":
        return Delivery("drop", action, params)
    if op == "tamper_payload_byte":
        return Delivery("raw", action, params, (int(ops.get("offset", 0)), int(ops.get("xor", 1)) & 0xFF or 1))
    if op == "swap_layer_order":
        paths = params["layer_paths"]
        if "i" in ops:
            i, j = int(ops["i"]), int(ops.get("j", len(paths) - 1))
            paths[i], paths[j] = paths[j], paths[i]
        else:
            paths.reverse()
    elif op == "inject_rogue_layer_hash":
        if action == "mount_device":
            params["device_hash"] = ops.get("hash", ROGUE_HASH)
        elif action == "mount_overlay":
            params["layer_paths"].insert(int(ops.get("position", 0)), ops["path"])
        else:
            raise ScenarioError(f"{op} does not apply to {action}")
    elif op == "alter_env":
        env = [v for v in params["env"] if v.split("=", 1)[0] not in set(ops.get("remove", []))]
        for k, v in ops.get("replace", {}).items():
            env = [f"{k}={v}" if e.split("=", 1)[0] == k else e for e in env]
        env.extend(ops.get("add", []))
        params["env"] = env
    elif op == "alter_command":
        if "command" in ops:
            params["command"] = list(ops["command"])
        else:
            params["command"] = params["command"] + list(ops.get("append", ["--evil"]))
    elif op == "alter_mount_destination":
        idx = int(ops.get("index", 0))
        params["mounts"][idx]["destination"] = ops.get("destination", "/")
    return Delivery("send", action, params)


def tampered_body(seq: int, action: str, payload: dict, offset: int, xor: int) -> bytes:
    raw = bytearray(dumps(payload))
    if not -len(raw) <= offset < len(raw):
        raise ScenarioError(f"tamper offset {offset} outside payload of {len(raw)} bytes")
    raw[offset] ^= xor
    # Same byte layout dumps() would give for the untampered message.
    return (b'{"action":' + dumps(action) + b',"kind":"request","payload":' + bytes(raw)
            + b',"seq":' + str(seq).encode() + b"}")


# -- runner ---------------------------------------------------------------------------


@dataclass
class StepResult:
    index: int
    label: str
    expected: str
    actual: str
    deny_reason: str | None = None
    atomic: bool = True

    @property
    def passed(self) -> bool:
        return self.expected == self.actual and self.atomic


@dataclass
class ScenarioReport:
    name: str
    steps: list[StepResult] = field(default_factory=list)
    safe: bool | None = None
    violations: list[str] = field(default_factory=list)
    aborted_at: int | None = None
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.aborted_at is None and self.safe is True and all(s.passed for s in self.steps)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "safe": self.safe,
            "violations": self.violations,
            "aborted_at": self.aborted_at,
            "error": self.error,
            "steps": [
                {"index": s.index, "label": s.label, "expected": s.expected, "actual": s.actual,
                 "deny_reason": s.deny_reason, "atomic": s.atomic, "passed": s.passed}
                for s in self.steps
            ],
        }


def _expect_ok(reply: dict, what: str) -> dict:
    if not reply.get("allowed"):
        raise TransportError(f"{what}: {reply.get('deny_reason')}")
    return reply["payload"]


def local_transport(scenario: Scenario, key_source=None) -> InProcessTransport:
    """Boot a fresh in-process guest for ``scenario`` (policy checked against host data)."""
    text = json.dumps(scenario.policy)
    host_data = measure_policy(parse_policy(text)).host_data
    agent = GuestAgent.boot(text, host_data, disks=build_disks(scenario.disks), key_source=key_source)
    return InProcessTransport(GuestEndpoint(agent, diagnostics=True))


def run_scenario(scenario: Scenario, transport=None) -> ScenarioReport:
    """Execute every step in order and score it.

    ``transport`` must reach a guest endpoint with diagnostics enabled; when
    omitted an in-process guest is booted.  A remote guest is reset to the
    scenario's policy first.
    """
    report = ScenarioReport(scenario.name)
    index = -1
    try:
        if transport is None:
            transport = local_transport(scenario)
        else:
            _expect_ok(transport.request("sim.reset", {"policy": scenario.policy, "disks": scenario.disks}),
                       "reset")
        for index, step in enumerate(scenario.steps):
            base = step.request if step.request is not None else scenario.requests[step.base]
            delivery = apply_mutation(base, step.mutation)
            before = _expect_ok(transport.request("sim.snapshot", {}), "snapshot")["snapshot"]
            if delivery.kind == "drop":
                reply = {"allowed": False, "deny_reason": "dropped"}
            elif delivery.kind == "raw":
                offset, xor = delivery.tamper
                body = tampered_body(transport.next_seq(), delivery.action, delivery.payload, offset, xor)
                replies = transport.send_raw(frame_body(body))
                if len(replies) != 1:
                    raise TransportError(f"expected one reply, got {len(replies)}")
                reply = replies[0]
            else:
                reply = transport.request(delivery.action, delivery.payload)
            after = _expect_ok(transport.request("sim.snapshot", {}), "snapshot")["snapshot"]
            allowed = bool(reply.get("allowed"))
            report.steps.append(StepResult(
                index, step.label, step.expect, "allow" if allowed else "deny",
                reply.get("deny_reason"), atomic=allowed or before == after,
            ))
        index = len(scenario.steps)
        safety = _expect_ok(transport.request("sim.safety", {}), "safety")
        report.safe = bool(safety["safe"])
        report.violations = list(safety.get("violations", []))
    except (TransportError, OSError, ScenarioError) as exc:
        report.aborted_at = max(index, 0)
        report.error = str(exc)
    return report


def run_corpus(directory=CORPUS_DIR, transport_factory=None) -> list[ScenarioReport]:
    reports = []
    for path in corpus_paths(directory):
        transport = transport_factory() if transport_factory else None
        try:
            reports.append(run_scenario(load_scenario(path), transport))
        finally:
            if transport is not None:
                transport.close()
    return reports


def coverage_gaps(scenarios: list[Scenario], coverage: dict) -> list[str]:
    """Threats in the manifest that the scenarios fail to exercise as declared."""
    gaps = []
    for threat, entry in coverage["threats"].items():
        tagged = [s for s in scenarios if threat in s.threats]
        if not tagged:
            gaps.append(f"{threat}: no scenario")
            continue
        used = set().union(*(s.operators for s in tagged))
        missing = set(entry.get("operators", [])) - used
        if missing:
            gaps.append(f"{threat}: operators not exercised {sorted(missing)}")
    unused = set(OPERATORS) - set().union(*(s.operators for s in scenarios)) if scenarios else set(OPERATORS)
    if unused:
        gaps.append(f"operators never used: {sorted(unused)}")
    return gaps


def random_key_source(seed: int | None = None):
    if seed is None:
        return lambda: os.urandom(32)
    state = hashlib.sha256(f"scratch-keys/{seed}".encode()).digest()

    def next_key() -> bytes:
        nonlocal state
        state = hashlib.sha256(state).digest()
        return state

    return next_key
