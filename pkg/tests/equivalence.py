"""Exhaustive engine-vs-reference comparison over short request sequences."""

import hashlib
import itertools

from ccsim.engine import EnforcementRequest, MetadataStore, enforce
from ccsim.policy import policy_from_dict

from reference_engine import ReferenceEvaluator

A = hashlib.sha256(b"eq-layer-a").hexdigest()
B = hashlib.sha256(b"eq-layer-b").hexdigest()

TWO_TEMPLATE_DOC = {
    "version": 1,
    "containers": [
        {"id": "t1", "layers": [A], "command": ["/srv/app"], "working_dir": "/",
         "env_rules": [{"pattern": "MODE=a", "strategy": "literal"}],
         "exec_processes": [{"command": ["/bin/ps"], "env_rules": [], "working_dir": "/"}],
         "signals": [15]},
        {"id": "t2", "layers": [A], "command": ["/srv/app"], "working_dir": "/",
         "env_rules": [{"pattern": "MODE=.*", "strategy": "regex"}],
         "exec_processes": [{"command": ["/bin/ls"], "env_rules": [], "working_dir": "/"}],
         "signals": [9, 15]},
    ],
}


def _create(env):
    return ("create_container", {"container_id": "c1", "overlay_id": "o1", "command": ["/srv/app"],
                                 "env": env, "working_dir": "/", "mounts": []})


def _exec(cmd):
    return ("exec_in_container", {"container_id": "c1", "command": cmd, "env": [], "working_dir": "/"})


def _signal(sig):
    return ("signal_process", {"container_id": "c1", "signal": sig, "command": ["/srv/app"]})


MOUNT_A = ("mount_device", {"device_hash": A, "target": "/run/l0"})
OVERLAY = ("mount_overlay", {"overlay_id": "o1", "layer_paths": ["/run/l0"], "target": "/run/ov"})

# Six actions, one request each.
ALPHABET_6 = [
    MOUNT_A,
    OVERLAY,
    _create(["MODE=a"]),
    _exec(["/bin/ps"]),
    _signal(9),
    ("unmount_device", {"target": "/run/l0"}),
]

ALPHABET_WIDE = ALPHABET_6 + [
    ("mount_device", {"device_hash": B, "target": "/run/l0"}),
    _create(["MODE=b"]),
    _exec(["/bin/ls"]),
    _signal(15),
    ("shutdown_container", {"container_id": "c1"}),
    ("unmount_overlay", {"target": "/run/ov"}),
]

# Sequences are enumerated from each of these starting histories so that
# container-level actions are reachable within three steps.
PREFIXES = [[], [MOUNT_A], [MOUNT_A, OVERLAY], [MOUNT_A, OVERLAY, _create(["MODE=a"])]]


def compare(alphabet, max_len=3, doc=TWO_TEMPLATE_DOC):
    """Return (sequences, decisions, disagreements)."""
    policy = policy_from_dict(doc)
    sequences = decisions = 0
    disagreements = []
    for prefix in PREFIXES:
        for n in range(1, max_len + 1):
            for seq in itertools.product(alphabet, repeat=n):
                sequences += 1
                store = MetadataStore()
                ref = ReferenceEvaluator(doc)
                for action, params in list(prefix) + list(seq):
                    decision, store = enforce(policy, store, EnforcementRequest(action, params))
                    expected = ref.decide(action, params)
                    decisions += 1
                    if decision.allowed != expected:
                        disagreements.append((prefix, seq, action, decision.allowed, expected))
                        break
    return sequences, decisions, disagreements
