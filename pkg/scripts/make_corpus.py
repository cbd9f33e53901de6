"""Regenerate the shipped scenario corpus (src/ccsim/corpus).

Run from the repository root: ``python3 scripts/make_corpus.py``.  Layer hashes
are the verity roots of the deterministic layer images the scenarios attach.
"""

from __future__ import annotations

import json
from pathlib import Path

from ccsim.scenario import layer_image

OUT = Path(__file__).resolve().parents[1] / "src" / "ccsim" / "corpus"
BLOCKS = 2
SEEDS = {"base": "layer/base", "app": "layer/web-app", "worker": "layer/worker"}
ROOT = {name: layer_image(seed, BLOCKS).root_hash.hex() for name, seed in SEEDS.items()}
NGINX = ["/usr/bin/nginx", "-g", "daemon off;"]
CAT = ["/bin/cat", "/etc/nginx/nginx.conf"]


def disks(corrupt: dict | None = None) -> dict:
    out = {}
    for name, seed in SEEDS.items():
        d = {"seed": seed, "blocks": BLOCKS}
        if corrupt and name in corrupt:
            d["corrupt_block"] = corrupt[name]
        out[ROOT[name]] = d
    return out


def policy(**flags) -> dict:
    return {
        "version": 1,
        "containers": [
            {
                "id": "web",
                "layers": [ROOT["base"], ROOT["app"]],
                "command": NGINX,
                "env_rules": [
                    {"pattern": "PATH=/usr/bin:/bin", "strategy": "literal"},
                    {"pattern": "PORT=[0-9]{2,5}", "strategy": "regex"},
                ],
                "working_dir": "/",
                "mounts": [{"source": "/run/secrets/[a-z]+", "destination": "/etc/secrets",
                            "type": "bind", "options": ["ro"]}],
                "exec_processes": [{"command": CAT, "env_rules": [], "working_dir": "/"}],
                "signals": [15],
            },
            {
                "id": "worker",
                "layers": [ROOT["base"], ROOT["worker"]],
                "command": ["/app/worker", "--queue", "jobs"],
                "env_rules": [{"pattern": "QUEUE_URL=amqp://.*", "strategy": "regex"}],
                "working_dir": "/app",
            },
        ],
        "external_processes": [{"command": ["/sbin/healthcheck", "--once"], "env_rules": [], "working_dir": "/"}],
        "flags": flags,
    }


def req(action: str, **params) -> dict:
    return {"action": action, "params": params}


REQUESTS = {
    "mount_base": req("mount_device", device_hash=ROOT["base"], target="/run/layers/0"),
    "mount_app": req("mount_device", device_hash=ROOT["app"], target="/run/layers/1"),
    "mount_worker": req("mount_device", device_hash=ROOT["worker"], target="/run/layers/2"),
    "overlay_web": req("mount_overlay", overlay_id="ov-web",
                       layer_paths=["/run/layers/0", "/run/layers/1"], target="/run/ov/web"),
    "create_web": req("create_container", container_id="web-1", overlay_id="ov-web", command=NGINX,
                      env=["PATH=/usr/bin:/bin", "PORT=8080"], working_dir="/",
                      mounts=[{"source": "/run/secrets/tls", "destination": "/etc/secrets",
                               "type": "bind", "options": ["ro"]}]),
    "exec_cat": req("exec_in_container", container_id="web-1", command=CAT, env=[], working_dir="/"),
    "sig_term": req("signal_process", container_id="web-1", signal=15, command=NGINX),
    "scratch": req("mount_scratch", target="/run/scratch/0", encrypted=True),
}
SETUP = [{"base": "mount_base", "expect": "allow"}, {"base": "mount_app", "expect": "allow"},
         {"base": "overlay_web", "expect": "allow"}]
RUNNING = SETUP + [{"base": "create_web", "expect": "allow"}]


def step(base=None, expect="deny", op=None, request=None, **operands) -> dict:
    s = {"expect": expect}
    if request is not None:
        s["request"] = request
    else:
        s["base"] = base
    if op:
        s["mutation"] = {"operator": op, "operands": operands} if operands else {"operator": op}
    return s


SCENARIOS = [
    dict(
        name="golden-path", threats=[],
        description="Untampered lifecycle: layers, overlay, container, exec, scratch, signal and teardown all allowed.",
        steps=RUNNING + [
            step("exec_cat", "allow"), step("scratch", "allow"), step("sig_term", "allow"),
            step(request=req("shutdown_container", container_id="web-1"), expect="allow"),
            step(request=req("unmount_overlay", target="/run/ov/web"), expect="allow"),
            step(request=req("unmount_device", target="/run/layers/1"), expect="allow"),
            step(request=req("unmount_device", target="/run/layers/0"), expect="allow"),
            step(request=req("unmount_scratch", target="/run/scratch/0"), expect="allow"),
        ],
    ),
    dict(
        name="rogue-layer-device", threats=["layer-vhd", "block-devices", "container-definitions"],
        description="Host attaches a block device whose root hash is not a policy layer.",
        steps=[
            step("mount_base", "allow"),
            step("mount_app", op="inject_rogue_layer_hash"),
            step("mount_app", "allow"),
            step("overlay_web", "allow"),
            step("create_web", "allow"),
        ],
    ),
    dict(
        name="corrupted-layer-disk", threats=["layer-vhd", "block-devices"],
        description="Host serves a layer whose data was modified after its tree was built; attach fails integrity.",
        disks=disks({"app": 1}),
        steps=[
            step("mount_base", "allow"),
            step("mount_app"),
            step("overlay_web"),
            step("create_web"),
        ],
    ),
    dict(
        name="layer-combination", threats=["layer-combination", "container-definitions"],
        description="Every device is a policy layer but the host combines them into stacks no template has.",
        steps=[
            step("mount_base", "allow"), step("mount_app", "allow"), step("mount_worker", "allow"),
            step("overlay_web", op="inject_rogue_layer_hash", path="/run/layers/2", position=2),
            step(request=req("mount_overlay", overlay_id="ov-x", layer_paths=["/run/layers/1", "/run/layers/2"],
                             target="/run/ov/x")),
            step(request=req("mount_overlay", overlay_id="ov-y", layer_paths=["/run/layers/1"], target="/run/ov/y")),
            step("overlay_web", "allow"),
            step(request=req("mount_overlay", overlay_id="ov-worker", layer_paths=["/run/layers/0", "/run/layers/2"],
                             target="/run/ov/worker"), expect="allow"),
        ],
    ),
    dict(
        name="overlay-layer-order", threats=["overlay-layers", "container-definitions"],
        description="Host passes the right layers to the overlay in the wrong order.",
        steps=[
            step("mount_base", "allow"), step("mount_app", "allow"),
            step("overlay_web", op="swap_layer_order"),
            step("overlay_web", "allow"),
            step("create_web", "allow"),
        ],
    ),
    dict(
        name="env-tampering", threats=["env-and-command", "container-definitions", "oci-runtime-spec"],
        description="Host adds or alters environment variables; removing one is allowed under allow-only rules.",
        steps=SETUP + [
            step("create_web", op="alter_env", add=["LD_PRELOAD=/tmp/hook.so"]),
            step("create_web", op="alter_env", replace={"PORT": "80; curl evil"}),
            step("create_web", op="alter_env", replace={"PATH": "/tmp:/usr/bin:/bin"}),
            step("create_web", "allow", op="alter_env", remove=["PORT"]),
        ],
    ),
    dict(
        name="command-tampering", threats=["env-and-command", "container-definitions", "oci-runtime-spec"],
        description="Host changes the container entry point or its arguments.",
        steps=SETUP + [
            step("create_web", op="alter_command", append=["-c", "/tmp/evil.conf"]),
            step("create_web", op="alter_command", command=["/bin/sh"]),
            step(request=dict(REQUESTS["create_web"], params=dict(REQUESTS["create_web"]["params"], working_dir="/tmp"))),
            step("create_web", "allow"),
        ],
    ),
    dict(
        name="mount-tampering", threats=["oci-runtime-spec", "container-definitions"],
        description="Host redirects a mount destination or bind-mounts an unlisted UVM path.",
        steps=SETUP + [
            step("create_web", op="alter_mount_destination", destination="/"),
            step("create_web", op="alter_mount_destination", destination="/etc"),
            step(request=dict(REQUESTS["create_web"], params=dict(
                REQUESTS["create_web"]["params"],
                mounts=[{"source": "/etc/shadow", "destination": "/etc/secrets", "type": "bind", "options": ["ro"]}]))),
            step(request=dict(REQUESTS["create_web"], params=dict(
                REQUESTS["create_web"]["params"],
                mounts=[{"source": "/run/secrets/tls", "destination": "/etc/secrets", "type": "bind",
                         "options": ["rw"]}]))),
            step("create_web", "allow"),
        ],
    ),
    dict(
        name="network-tampering", threats=["network", "remote-comms"],
        description="Host flips bytes in transit, replays, drops and reorders bridge messages.",
        steps=[
            step("mount_base", op="tamper_payload_byte", offset=20, xor=1),
            step("mount_base", "allow"),
            step("mount_base", op="replay_request"),
            step("mount_app", op="drop_request"),
            step("create_web", op="reorder_requests"),
            step("mount_app", "allow"),
            step("overlay_web", "allow"),
            step("overlay_web", op="replay_request"),
            step("create_web", "allow"),
            step("create_web", op="replay_request"),
            step("exec_cat", op="tamper_payload_byte", offset=14, xor=2),
            step("exec_cat", "allow"),
        ],
    ),
    dict(
        name="arbitrary-exec", threats=["arbitrary-exec"],
        description="Host requests processes the policy does not list, inside a container and in the UVM.",
        steps=RUNNING + [
            step("exec_cat", "allow"),
            step("exec_cat", op="alter_command", command=["/bin/sh", "-c", "cat /etc/secrets/*"]),
            step("exec_cat", op="alter_command", append=["/etc/secrets/tls"]),
            step(request=req("exec_in_container", container_id="web-2", command=CAT, env=[], working_dir="/")),
            step(request=req("exec_external", command=["/bin/bash"], env=[], working_dir="/")),
            step(request=req("exec_external", command=["/sbin/healthcheck", "--once"], env=["X=1"], working_dir="/")),
            step(request=req("exec_external", command=["/sbin/healthcheck", "--once"], env=[], working_dir="/"),
                 expect="allow"),
        ],
    ),
    dict(
        name="signal-tampering", threats=["arbitrary-exec", "oci-runtime-spec"],
        description="Host sends signals the policy does not allow or targets commands that are not running.",
        steps=RUNNING + [
            step(request=req("signal_process", container_id="web-1", signal=9, command=NGINX)),
            step(request=req("signal_process", container_id="web-1", signal=15, command=["/bin/sh"])),
            step(request=req("signal_process", container_id="web-9", signal=15, command=NGINX)),
            step("sig_term", "allow"),
        ],
    ),
    dict(
        name="debug-requests", threats=["debug-info"],
        description="Host asks for properties, stacks and logs while the policy disables them.",
        steps=RUNNING + [
            step(request=req("get_properties")),
            step(request=req("dump_stacks")),
            step(request=req("runtime_logging")),
            step(request=req("container_logging")),
        ],
    ),
    dict(
        name="debug-flags-honoured", threats=["debug-info"], policy=policy(allow_properties_access=True),
        description="Only the debug interface the policy enables is served.",
        steps=[
            step(request=req("get_properties"), expect="allow"),
            step(request=req("dump_stacks")),
            step(request=req("container_logging")),
        ],
    ),
    dict(
        name="scratch-and-host-devices", threats=["block-devices"],
        description="Host asks for an unencrypted scratch disk or a raw host device.",
        steps=[
            step(request=req("mount_scratch", target="/run/scratch/0", encrypted=False)),
            step("scratch", "allow"),
            step("scratch", op="replay_request"),
            step(request=req("mount_host_device", target="/dev/sda")),
        ],
    ),
]

COVERAGE = {
    "threats": {
        "oci-runtime-spec": {"description": "tamper with the container's OCI runtime specification",
                             "operators": ["alter_env", "alter_command", "alter_mount_destination"]},
        "block-devices": {"description": "tamper with layer block devices and the writable scratch device",
                          "operators": ["inject_rogue_layer_hash"]},
        "container-definitions": {
            "description": "reorder or inject overlay layers, add/alter/remove env vars, alter the command, "
                           "alter mount sources and destinations",
            "operators": ["swap_layer_order", "inject_rogue_layer_hash", "alter_env", "alter_command",
                          "alter_mount_destination"]},
        "network": {"description": "add, delete and modify network messages",
                    "operators": ["tamper_payload_byte", "replay_request", "drop_request", "reorder_requests"]},
        "arbitrary-exec": {"description": "request arbitrary commands in the UVM and in containers",
                           "operators": ["alter_command"]},
        "debug-info": {"description": "request I/O, stacks or container properties (literal requests, no operator)",
                       "operators": []},
        "layer-vhd": {"description": "alter or fabricate layer disks", "operators": ["inject_rogue_layer_hash"]},
        "layer-combination": {"description": "mount any combination of layers",
                              "operators": ["inject_rogue_layer_hash"]},
        "overlay-layers": {"description": "pass any set or order of layers to the overlay",
                           "operators": ["swap_layer_order"]},
        "env-and-command": {"description": "any combination of environment variables or commands",
                            "operators": ["alter_env", "alter_command"]},
        "remote-comms": {"description": "manipulate host/guest communication",
                         "operators": ["tamper_payload_byte", "replay_request", "drop_request", "reorder_requests"]},
    }
}


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    for old in OUT.glob("*.scn"):
        old.unlink()
    for i, sc in enumerate(SCENARIOS):
        doc = {
            "name": sc["name"],
            "description": sc["description"],
            "threats": sc["threats"],
            "policy": sc.get("policy") or policy(),
            "disks": sc.get("disks") or disks(),
            "requests": REQUESTS,
            "steps": sc["steps"],
        }
        (OUT / f"{i:02d}-{sc['name']}.scn").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    (OUT / "coverage.json").write_text(json.dumps(COVERAGE, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(SCENARIOS)} scenarios to {OUT}")


if __name__ == "__main__":
    main()
