"""Brute-force reference evaluator used to cross-check the policy engine.

It shares no code with ``ccsim.engine``.  Instead of maintaining candidate
sets, every decision is recomputed from the full history of previously
allowed requests: a container request is allowed iff some template is
consistent with everything that ever happened to that container.  It reads
the raw policy document (plain dicts), not the parsed dataclasses.
"""

import re


def _env_ok(env, rules):
    for var in env:
        if not any(
            (r.get("strategy", "literal") == "literal" and var == r["pattern"])
            or (r.get("strategy") == "regex" and re.fullmatch(r["pattern"], var))
            for r in rules
        ):
            return False
    return True


def _mounts_ok(mounts, rules):
    for m in mounts:
        if not any(
            re.fullmatch(r["source"], m["source"])
            and r["destination"] == m["destination"]
            and r.get("type", "bind") == m["type"]
            and sorted(r.get("options", [])) == sorted(m["options"])
            for r in rules
        ):
            return False
    return True


def _proc_ok(p, rules):
    return any(
        list(r["command"]) == list(p["command"])
        and r.get("working_dir", "/") == p["working_dir"]
        and _env_ok(p["env"], r.get("env_rules", []))
        for r in rules
    )


class ReferenceEvaluator:
    def __init__(self, policy_doc):
        self.templates = policy_doc.get("containers", [])
        self.history = []  # allowed (action, params)

    # -- views recomputed from history every time --------------------------------

    def _devices(self):
        devices = {}
        for action, p in self.history:
            if action == "mount_device":
                devices[p["target"]] = p["device_hash"]
            elif action == "unmount_device":
                devices.pop(p["target"], None)
        return devices

    def _overlays(self):
        overlays, devices = {}, {}
        for action, p in self.history:
            if action == "mount_device":
                devices[p["target"]] = p["device_hash"]
            elif action == "unmount_device":
                devices.pop(p["target"], None)
            elif action == "mount_overlay":
                overlays[p["overlay_id"]] = (p["target"], [devices[x] for x in p["layer_paths"]])
            elif action == "unmount_overlay":
                for oid in [o for o, (t, _) in overlays.items() if t == p["target"]]:
                    del overlays[oid]
        return overlays

    def _containers(self):
        """cid -> (layer digests of its overlay at creation, create params, [exec params])."""
        containers, overlays = {}, {}
        replay = ReferenceEvaluator({"containers": self.templates})
        for action, p in self.history:
            if action == "create_container":
                overlays = dict(replay._overlays())
                containers[p["container_id"]] = (overlays[p["overlay_id"]][1], p, [])
            elif action == "exec_in_container":
                containers[p["container_id"]][2].append(p)
            elif action == "shutdown_container":
                containers.pop(p["container_id"], None)
            replay.history.append((action, p))
        return containers

    def _consistent(self, t, digests, create, execs):
        return (
            list(t["layers"]) == list(digests)
            and list(t["command"]) == list(create["command"])
            and t.get("working_dir", "/") == create["working_dir"]
            and _env_ok(create["env"], t.get("env_rules", []))
            and _mounts_ok(create["mounts"], t.get("mounts", []))
            and all(_proc_ok(e, t.get("exec_processes", [])) for e in execs)
        )

    # -- decisions ------------------------------------------------------------------

    def decide(self, action, p) -> bool:
        devices = self._devices()
        overlays = self._overlays()
        containers = self._containers()
        if action == "mount_device":
            ok = p["target"] not in devices and any(p["device_hash"] in t["layers"] for t in self.templates)
        elif action == "unmount_device":
            ok = p["target"] in devices
        elif action == "mount_overlay":
            ok = (
                p["overlay_id"] not in overlays
                and all(t != p["target"] for t, _ in overlays.values())
                and all(x in devices for x in p["layer_paths"])
                and any(list(t["layers"]) == [devices[x] for x in p["layer_paths"]] for t in self.templates)
            )
        elif action == "unmount_overlay":
            ok = any(t == p["target"] for t, _ in overlays.values())
        elif action == "create_container":
            ok = (
                p["overlay_id"] in overlays
                and p["container_id"] not in containers
                and any(self._consistent(t, overlays[p["overlay_id"]][1], p, []) for t in self.templates)
            )
        elif action == "exec_in_container":
            c = containers.get(p["container_id"])
            ok = c is not None and any(self._consistent(t, c[0], c[1], c[2] + [p]) for t in self.templates)
        elif action == "signal_process":
            c = containers.get(p["container_id"])
            ok = (
                c is not None
                and (list(p["command"]) == list(c[1]["command"]) or any(
                    list(p["command"]) == list(e["command"]) for e in c[2]))
                and any(self._consistent(t, c[0], c[1], c[2]) and p["signal"] in t.get("signals", [])
                        for t in self.templates)
            )
        elif action == "shutdown_container":
            ok = p["container_id"] in containers
        else:
            raise ValueError(f"reference evaluator does not model {action}")
        if ok:
            self.history.append((action, p))
        return ok
