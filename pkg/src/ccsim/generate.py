"""Random execution policies and single-field policy mutations, for fuzzing and tests."""

from __future__ import annotations

import hashlib
import random

from .policy import ExecutionPolicy, PolicyError, policy_from_dict, policy_to_dict

LAYER_POOL = [hashlib.sha256(f"layer-{i}".encode()).hexdigest() for i in range(10)]
COMMANDS = [
    ["/bin/sh"],
    ["/usr/bin/nginx", "-g", "daemon off;"],
    ["/app/server", "--port", "8080"],
    ["/bin/busybox", "sleep", "3600"],
    ["python3", "-m", "http.server"],
]
LITERAL_ENV = ["PATH=/usr/bin:/bin", "HOME=/root", "LANG=C.UTF-8", "TERM=xterm"]
# pattern -> values known to full-match it
REGEX_ENV = {
    "PORT=[0-9]{2,5}": ["PORT=80", "PORT=8080"],
    "LOG_LEVEL=(debug|info|warn)": ["LOG_LEVEL=debug", "LOG_LEVEL=warn"],
    "TOKEN_[A-Z]+=.*": ["TOKEN_A=xyz", "TOKEN_DB="],
}
WORKDIRS = ["/", "/srv", "/app"]
MOUNTS = [
    ({"source": "/run/secrets/[a-z]+", "destination": "/etc/secrets", "type": "bind", "options": ["ro"]},
     "/run/secrets/db"),
    ({"source": "/var/log/app", "destination": "/logs", "type": "bind", "options": ["rbind", "rw"]},
     "/var/log/app"),
]
MOUNT_SAMPLES = {m["source"]: sample for m, sample in MOUNTS}
ROGUE_SOURCES = ["/", "/etc", "/run/secrets/../shadow", "/var/log/app2"]
EXEC_COMMANDS = [["/bin/sh", "-c", "true"], ["/bin/cat", "/etc/hosts"], ["/usr/bin/env"]]
SIGNALS = [1, 2, 9, 10, 15]
HOST_PATTERNS = {"/dev/gpu[0-9]": ["/dev/gpu0", "/dev/gpu3"], "/dev/fuse": ["/dev/fuse"]}


def _env_rules(rng: random.Random) -> list[dict]:
    rules = [{"pattern": p, "strategy": "literal"} for p in rng.sample(LITERAL_ENV, rng.randint(0, 2))]
    rules += [{"pattern": p, "strategy": "regex"} for p in rng.sample(sorted(REGEX_ENV), rng.randint(0, 2))]
    return rules


def _process(rng: random.Random, command: list[str] | None = None) -> dict:
    return {
        "command": list(command or rng.choice(EXEC_COMMANDS)),
        "env_rules": _env_rules(rng),
        "working_dir": rng.choice(WORKDIRS),
    }


def random_policy_dict(rng: random.Random, max_templates: int = 4) -> dict:
    templates = []
    for i in range(rng.randint(1, max_templates)):
        if templates and rng.random() < 0.3:
            layers = list(rng.choice(templates)["layers"])  # shared stack -> several candidates
        else:
            layers = rng.sample(LAYER_POOL, rng.randint(1, 3))
        templates.append({
            "id": f"t{i}",
            "layers": layers,
            "command": list(rng.choice(COMMANDS)),
            "env_rules": _env_rules(rng),
            "working_dir": rng.choice(WORKDIRS),
            "mounts": [m for m, _ in rng.sample(MOUNTS, rng.randint(0, len(MOUNTS)))],
            "exec_processes": [_process(rng) for _ in range(rng.randint(0, 2))],
            "signals": sorted(rng.sample(SIGNALS, rng.randint(0, 3))),
            "allow_stdio_access": rng.random() < 0.5,
        })
    return {
        "version": 1,
        "containers": templates,
        "external_processes": [_process(rng) for _ in range(rng.randint(0, 2))],
        "flags": {
            "allow_properties_access": rng.random() < 0.5,
            "allow_dump_stacks": rng.random() < 0.3,
            "allow_runtime_logging": rng.random() < 0.5,
            "allow_container_logging": rng.random() < 0.5,
            "allow_unencrypted_scratch": rng.random() < 0.3,
            "allow_host_device_mounts": rng.sample(sorted(HOST_PATTERNS), rng.randint(0, 2)),
        },
    }


def random_policy(rng: random.Random, max_templates: int = 4) -> ExecutionPolicy:
    while True:
        try:
            return policy_from_dict(random_policy_dict(rng, max_templates))
        except PolicyError:
            continue  # generated an identical template pair; draw again


def _leaves(node, path=()):
    """Yield (path, value) for every scalar in a plain-data document."""
    if isinstance(node, dict):
        for k in sorted(node):
            yield from _leaves(node[k], path + (k,))
    elif isinstance(node, list):
        for i, v in enumerate(node):
            yield from _leaves(v, path + (i,))
    else:
        yield path, node


def _set(doc, path, value):
    for p in path[:-1]:
        doc = doc[p]
    doc[path[-1]] = value


def _mutated_value(rng: random.Random, path, value):
    if isinstance(value, bool):
        return not value
    if isinstance(value, int):
        return value % 64 + 1 if path[-2] == "signals" else None
    if isinstance(value, str):
        if path[-1] == "strategy":
            return "regex" if value == "literal" else "literal"
        if len(value) == 64 and all(c in "0123456789abcdef" for c in value):
            i = rng.randrange(64)
            c = rng.choice([h for h in "0123456789abcdef" if h != value[i]])
            return value[:i] + c + value[i + 1:]
        return value + rng.choice("xyz019")
    return None


def mutate_policy(rng: random.Random, policy: ExecutionPolicy) -> tuple[ExecutionPolicy, str]:
    """Change exactly one scalar field of ``policy``; returns (mutant, dotted path).

    Draws again when the change would make the document invalid (for example a
    literal env rule losing its single ``=``) or leaves it unchanged.
    """
    doc = policy_to_dict(policy)
    leaves = [(p, v) for p, v in _leaves(doc) if p != ("version",)]
    if not leaves:
        raise ValueError("policy has no mutable fields")
    while True:
        path, value = rng.choice(leaves)
        new = _mutated_value(rng, path, value)
        if new is None or new == value:
            continue
        mutant_doc = policy_to_dict(policy)
        _set(mutant_doc, path, new)
        try:
            mutant = policy_from_dict(mutant_doc)
        except PolicyError:
            continue
        if mutant != policy:
            return mutant, ".".join(map(str, path))
