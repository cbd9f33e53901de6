"""Command-line interface: ``ccsim <subcommand> ...``.

Exit codes: 0 success, 1 a check or safety property failed, 2 bad usage or input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import storage
from .policy import PolicyError, load_policy, measure_policy, policy_from_dict, render_policy

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2
SEED_ENV = "PARMA_SIM_SEED"

log = logging.getLogger("ccsim")


class UsageError(Exception):
    """Bad arguments or unreadable input; maps to exit code 2."""


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw, 0)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _emit(args, doc: dict, text: str) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True) if args.json else text)


def _read_bytes(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _load_policy(path: str):
    try:
        return load_policy(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    except PolicyError as exc:
        raise UsageError(f"{path}: {exc}") from None


# -- subcommands -----------------------------------------------------------------


def cmd_hash_layer(args) -> int:
    data = _read_bytes(args.data)
    if not data:
        raise UsageError(f"{args.data}: layer image is empty")
    try:
        salt = bytes.fromhex(args.salt) if args.salt else bytes(storage.SALT_SIZE)
        image = storage.build_tree(data, salt)
    except (ValueError, storage.StorageFormatError) as exc:
        raise UsageError(f"salt: {exc}") from None
    out = args.out or args.data + ".vrt"
    try:
        storage.write_sidecar(image, out)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc.strerror}") from None
    root = image.root_hash.hex()
    _emit(args, {"root_hash": root, "blocks": image.block_count, "sidecar": out}, root)
    return EXIT_OK


def cmd_measure(args) -> int:
    m = measure_policy(_load_policy(args.policy))
    _emit(args, {"sha512": m.hex(), "host_data": m.host_data.hex()},
          f"sha512     {m.hex()}\nhost_data  {m.host_data.hex()}")
    return EXIT_OK


def _spec_to_policy_dict(spec) -> dict:
    if not isinstance(spec, dict) or not isinstance(spec.get("containers"), list) or not spec["containers"]:
        raise UsageError("container spec must be an object with a non-empty 'containers' list")
    templates = []
    for i, c in enumerate(spec["containers"]):
        if not isinstance(c, dict):
            raise UsageError(f"containers[{i}] must be an object")
        if not c.get("layers"):
            raise UsageError(f"containers[{i}]: at least one layer is required")
        env = c.get("env", [])
        if not isinstance(env, list):
            raise UsageError(f"containers[{i}].env must be a list of NAME=value strings")
        templates.append({
            "id": str(c.get("id", c.get("name", f"container{i}"))),
            "layers": c["layers"],
            "command": c.get("command", []),
            "env_rules": [{"pattern": e, "strategy": "literal"} for e in env],
            "working_dir": c.get("working_dir", "/"),
            "mounts": c.get("mounts", []),
        })
    return {"version": 1, "containers": templates}


def cmd_gen_policy(args) -> int:
    try:
        spec = json.loads(_read_bytes(args.spec))
    except ValueError as exc:
        raise UsageError(f"{args.spec}: not valid JSON ({exc})") from None
    try:
        policy = policy_from_dict(_spec_to_policy_dict(spec))
    except PolicyError as exc:
        raise UsageError(f"{args.spec}: {exc}") from None
    text = render_policy(policy)
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot write {args.out}: {exc.strerror}") from None
        m = measure_policy(policy)
        _emit(args, {"policy": args.out, "sha512": m.hex(), "host_data": m.host_data.hex()}, args.out)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_serve_guest(args) -> int:
    from .guest import GuestAgent, GuestFault
    from .scenario import random_key_source
    from .wire import FramedServer, GuestEndpoint

    doc = _read_bytes(args.policy)
    try:
        host_data = bytes.fromhex(args.host_data) if args.host_data else None
        seed = resolve_seed(args.seed) if args.seed is not None or os.environ.get(SEED_ENV) else None
        agent = GuestAgent.boot(doc, host_data, key_source=random_key_source(seed))
    except GuestFault as exc:
        print(f"error: guest refused to boot: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    server = FramedServer(GuestEndpoint(agent, diagnostics=args.sim_diagnostics), args.host, args.port)
    host, port = server.address
    print(f"guest agent listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_run_scenario(args) -> int:
    from .scenario import (CORPUS_DIR, ScenarioError, corpus_paths, coverage_gaps, load_coverage,
                           load_scenario, local_transport, random_key_source, run_scenario)
    from .wire import TcpTransport, TransportError, parse_endpoint

    paths = [Path(p) for p in args.scenarios] or corpus_paths(CORPUS_DIR)
    try:
        scenarios = [load_scenario(p) for p in paths]
    except OSError as exc:
        raise UsageError(f"cannot read scenario: {exc}") from None
    except ScenarioError as exc:
        raise UsageError(str(exc)) from None
    if not scenarios:
        raise UsageError("no scenarios to run")
    endpoint = None
    if args.endpoint:
        try:
            endpoint = parse_endpoint(args.endpoint)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    seed = resolve_seed(args.seed)
    reports = []
    for scenario in scenarios:
        if endpoint:
            try:
                transport = TcpTransport(*endpoint)
            except TransportError as exc:
                raise UsageError(str(exc)) from None
        else:
            transport = local_transport(scenario, key_source=random_key_source(seed))
        try:
            reports.append(run_scenario(scenario, transport))
        finally:
            transport.close()
    gaps = coverage_gaps(scenarios, load_coverage()) if not args.scenarios else []
    ok = all(r.passed for r in reports) and not gaps
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name}" + (f"  ({r.error})" if r.error else "")
             for r in reports]
    for r in reports:
        lines += [f"      step {s.index} {s.label}: expected {s.expected}, got {s.actual} ({s.deny_reason})"
                  for s in r.steps if not s.passed]
        lines += [f"      unsafe: {v}" for v in r.violations]
    lines += [f"coverage gap: {g}" for g in gaps]
    lines.append(f"{sum(r.passed for r in reports)}/{len(reports)} scenarios passed")
    _emit(args, {"ok": ok, "scenarios": [r.to_dict() for r in reports], "coverage_gaps": gaps}, "\n".join(lines))
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_fuzz(args) -> int:
    from .fuzz import fuzz_traces

    if args.traces < 0 or args.steps < 1 or args.policies < 1:
        raise UsageError("--traces must be >= 0, --steps and --policies >= 1")
    policy = _load_policy(args.policy) if args.policy else None
    report = fuzz_traces(policy, args.steps, args.traces, resolve_seed(args.seed), args.policies)
    text = (f"seed {report.seed}: {report.traces} traces x {report.steps_per_trace} steps over "
            f"{report.policies} policies; {report.allowed} allowed, {report.denied} denied; "
            f"safety violations {report.safety_violations}, atomicity violations {report.atomicity_violations}")
    if report.first_violation:
        text += f"\nfirst violation: {report.first_violation}"
    _emit(args, report.to_dict(), text)
    return EXIT_OK if report.ok else EXIT_VIOLATION


def cmd_attest_demo(args) -> int:
    from .demo import attest_demo

    policy = _load_policy(args.policy) if args.policy else None
    result = attest_demo(policy, args.tamper, resolve_seed(args.seed))
    if args.tamper == "none":
        ok = result.key_unwrapped and not result.failed_checks
    else:
        ok = len(result.failed_checks) == 1 and not result.key_released
    lines = [f"  {label:<22} {'ok' if passed else 'FAIL'}" for label, passed in result.checks.items()]
    lines.append(f"  {'key released':<22} {'yes' if result.key_released else 'no'}")
    lines.append(f"  {'key unwrapped':<22} {'yes' if result.key_unwrapped else 'no'}")
    if result.rejection or result.denial:
        lines.append(f"  reason: {result.rejection or result.denial}")
    _emit(args, {**result.to_dict(), "ok": ok}, f"attest-demo (tamper={args.tamper})\n" + "\n".join(lines))
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_bench(args) -> int:
    from .bench import bench_enforce

    result = bench_enforce(args.templates, args.iterations)
    _emit(args, result.to_dict(),
          f"enforce(create_container), {result.templates} templates: median {result.median_s * 1e3:.4f} ms, "
          f"p95 {result.p95_s * 1e3:.4f} ms over {result.iterations} runs")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .demo import TAMPERS

    parser = argparse.ArgumentParser(prog="ccsim", description="Confidential container control-plane simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, func, help_, seed=False):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
        if seed:
            p.add_argument("--seed", type=int, default=None, help=f"RNG seed (default ${SEED_ENV}, else 0)")
        p.set_defaults(func=func)
        return p

    p = add("hash-layer", cmd_hash_layer, "build a verity tree for a layer image and print its root hash")
    p.add_argument("data")
    p.add_argument("--salt", help="32-byte salt as hex (default all zero)")
    p.add_argument("--out", help="sidecar path (default DATA.vrt)")

    p = add("measure", cmd_measure, "print the SHA-512 policy measurement and 32-byte host data")
    p.add_argument("policy")

    p = add("gen-policy", cmd_gen_policy, "convert a container spec into a policy document")
    p.add_argument("spec")
    p.add_argument("-o", "--out", help="write the policy here instead of stdout")

    p = add("serve-guest", cmd_serve_guest, "host a guest agent endpoint over TCP", seed=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--host-data", help="launch host data (hex); the guest refuses to boot on mismatch")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7700)
    p.add_argument("--sim-diagnostics", action="store_true",
                   help="enable sim.snapshot/sim.safety/sim.reset (simulation only)")

    p = add("run-scenario", cmd_run_scenario, "replay adversarial scenarios (default: shipped corpus)", seed=True)
    p.add_argument("scenarios", nargs="*")
    p.add_argument("--endpoint", help="host:port of a serve-guest --sim-diagnostics instance")

    p = add("fuzz", cmd_fuzz, "random adversarial traces checked by the safety oracle", seed=True)
    p.add_argument("--traces", type=int, default=1000)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--policies", type=int, default=24, help="generated policies (ignored with --policy)")
    p.add_argument("--policy", help="fuzz a single given policy instead")

    p = add("attest-demo", cmd_attest_demo, "run launch, attestation and key release in-process", seed=True)
    p.add_argument("--policy")
    p.add_argument("--tamper", choices=TAMPERS, default="none")

    p = add("bench", cmd_bench, "median enforce() latency for create_container")
    p.add_argument("--templates", type=int, default=50)
    p.add_argument("--iterations", type=int, default=2000)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
