"""Acceptance checks for the simulator, one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; each test prints its verdict
line directly to the terminal even when output capture is on.
"""

import json
import random
import time
from dataclasses import replace

import pytest

from ccsim import attestation as att
from ccsim import storage
from ccsim.attestation import AttestationRejected, MockPsp, VendorAuthority
from ccsim.bench import bench_enforce
from ccsim.cli import main
from ccsim.demo import attest_demo
from ccsim.generate import mutate_policy, random_policy
from ccsim.policy import measure_policy, parse_policy, policy_to_dict
from ccsim.scenario import corpus_paths, coverage_gaps, load_coverage, load_scenario, run_corpus

from equivalence import ALPHABET_6, PREFIXES, compare

# Adversary capabilities plus the host-facing attack points the corpus must exercise.
REQUIRED_THREATS = {
    "oci-runtime-spec", "block-devices", "container-definitions", "network", "arbitrary-exec", "debug-info",
    "layer-vhd", "layer-combination", "overlay-layers", "env-and-command", "remote-comms",
}


@pytest.fixture
def verdict(capsys):
    def report(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return report


def test_1_fuzzed_traces_keep_safety_and_atomicity(verdict, capsys):
    start = time.perf_counter()
    code = main(["fuzz", "--seed", "0", "--traces", "1000", "--steps", "50", "--json"])
    elapsed = time.perf_counter() - start
    doc = json.loads(capsys.readouterr().out)
    ok = (code == 0 and doc["policies"] >= 20 and doc["steps"] == 50_000 and doc["safety_violations"] == 0
          and doc["atomicity_violations"] == 0 and elapsed < 60)
    verdict(1, ok, f"{doc['steps']} steps over {doc['policies']} policies, "
                   f"{doc['safety_violations']} safety / {doc['atomicity_violations']} atomicity violations, "
                   f"{elapsed:.1f}s (limit 60s)")


def test_2_engine_matches_reference_evaluator(verdict):
    sequences, decisions, disagreements = compare(ALPHABET_6, max_len=3)
    # every sequence of length 1..3, replayed after each starting history
    ok = sequences == len(PREFIXES) * (6 + 36 + 216) and not disagreements
    verdict(2, ok, f"{sequences} sequences, {decisions} decisions, {len(disagreements)} disagreements")


def test_3_corpus_covers_threats_and_passes(verdict):
    scenarios = [load_scenario(p) for p in corpus_paths()]
    coverage = load_coverage()
    missing = REQUIRED_THREATS - set(coverage["threats"])
    gaps = coverage_gaps(scenarios, coverage)
    reports = run_corpus()
    failed = [r.name for r in reports if not r.passed]
    ok = not missing and not gaps and not failed and len(reports) == len(scenarios)
    verdict(3, ok, f"{len(reports) - len(failed)}/{len(reports)} scenarios pass, "
                   f"threats missing {sorted(missing)}, gaps {gaps}")


class Evidence:
    """One honest launch; ``build`` re-runs it with a single field of the evidence changed."""

    VENDOR_SEED = b"acceptance-vendor"
    CHIP = b"\x5a" * 32
    PAGES = [(bytes([i]) * att.PAGE_SIZE, 0xFFFC0000 + i * att.PAGE_SIZE) for i in range(4)]
    HOST_DATA = b"\x11" * 32

    def __init__(self, wrapping_der: bytes):
        self.vendor = VendorAuthority(self.VENDOR_SEED)
        self.claim = att.runtime_claim_digest(wrapping_der)
        self.measurement = self.build()[0].measurement

    def build(self, page=None, host_data=None, claim=None, sig_byte=None, rogue_chain=False):
        psp = MockPsp(self.CHIP)
        for i, (data, gpa) in enumerate(self.PAGES):
            if i == page:
                data = bytes([data[0] ^ 0x80]) + data[1:]
            psp.launch_update(data, gpa)
        psp.launch_finalize(host_data or self.HOST_DATA)
        report = psp.issue_report(att.seal_report_request(psp.guest_channel_key, claim or self.claim))
        if sig_byte is not None:
            sig = bytearray(report.signature)
            sig[sig_byte] ^= 0x01
            report = replace(report, signature=bytes(sig))
        vendor = VendorAuthority(b"rogue-vendor") if rogue_chain else self.vendor
        return report, vendor.endorse(psp.chip_id, psp.tcb_version, psp.vcek_public)

    def rejection(self, report, chain):
        try:
            att.verify_report(report, chain, self.vendor.public_key, {self.measurement}, self.HOST_DATA, self.claim)
        except AttestationRejected as exc:
            failed = {k for k, v in att.check_report(report, chain, self.vendor.public_key, {self.measurement},
                                                     self.HOST_DATA, self.claim).items() if not v}
            return exc.reason, failed
        return None, set()


def test_4_each_evidence_mutation_gets_its_label(verdict):
    _, wrapping_der = att.generate_wrapping_key()
    ev = Evidence(wrapping_der)
    other_claim = att.runtime_claim_digest(att.generate_wrapping_key()[1])
    cases = [(f"page {i}", att.REJECT_MEASUREMENT, dict(page=i)) for i in range(len(Evidence.PAGES))]
    cases += [
        ("host_data", att.REJECT_HOST_DATA, dict(host_data=b"\x12" * 32)),
        ("report_data", att.REJECT_REPORT_DATA, dict(claim=other_claim)),
        ("chain", att.REJECT_CHAIN, dict(rogue_chain=True)),
    ]
    cases += [(f"signature byte {b}", att.REJECT_SIGNATURE, dict(sig_byte=b)) for b in range(0, 512, 7)]
    wrong = []
    for name, label, mutation in cases:
        reason, failed = ev.rejection(*ev.build(**mutation))
        if reason != label or failed != {label}:
            wrong.append(f"{name}: got {reason} {sorted(failed)}")
    honest = ev.rejection(*ev.build())
    flow = attest_demo(seed=0)
    ok = not wrong and honest == (None, set()) and flow.key_released and flow.key_unwrapped
    verdict(4, ok, f"{len(cases) - len(wrong)}/{len(cases)} mutations rejected with exactly their label, "
                   f"untampered flow released={flow.key_released} unwrapped={flow.key_unwrapped}; {wrong[:3]}")


def _flip_all_bits(buf: bytearray, positions, reads) -> tuple[int, int]:
    """Flip every bit at ``positions`` in place; ``reads(pos)`` must raise IntegrityError each time."""
    trials = detected = 0
    for pos in positions:
        for bit in range(8):
            buf[pos] ^= 1 << bit
            trials += 1
            try:
                reads(pos)
            except storage.IntegrityError:
                detected += 1
            buf[pos] ^= 1 << bit
    return trials, detected


def test_5_storage_detects_every_corruption(verdict):
    blocks = 4
    data = bytes(random.Random(5).randbytes(blocks * storage.BLOCK_SIZE))
    clean = storage.build_tree(data, salt=b"\x07" * storage.SALT_SIZE)
    assert len(clean.tree) == 1
    image = replace(clean, data=bytearray(clean.data), tree=[bytearray(clean.tree[0])])
    root = clean.root_hash

    data_trials, data_hits = _flip_all_bits(
        image.data, range(len(image.data)),
        lambda pos: storage.verified_read(image, pos // storage.BLOCK_SIZE, root))

    def read_all(_pos):
        # A tree byte feeds the root of every block, so every read is affected; all must fail.
        failures = 0
        for i in range(blocks):
            try:
                storage.verified_read(image, i, root)
            except storage.IntegrityError:
                failures += 1
        if failures == blocks:
            raise storage.IntegrityError("all reads failed")

    tree_trials, tree_hits = _flip_all_bits(image.tree[0], range(len(image.tree[0])), read_all)
    intact = all(storage.verified_read(image, i, root) == clean.block(i) for i in range(blocks))

    dev, _ = storage.scratch_format(4, key=b"\x33" * 32)
    for i in range(4):
        dev.write(i, bytes([i + 1]) * storage.BLOCK_SIZE)
    sealed = dict(dev.sectors)
    reloc_trials = reloc_hits = 0
    for src in range(4):
        for dst in range(4):
            if src == dst:
                continue
            dev.sectors[dst] = sealed[src]
            reloc_trials += 1
            try:
                dev.read(dst)
            except storage.IntegrityError:
                reloc_hits += 1
            dev.sectors[dst] = sealed[dst]
    sector = bytearray(sealed[2])
    dev.sectors[2] = sector
    flip_trials, flip_hits = _flip_all_bits(sector, range(len(sector)), lambda _pos: dev.read(2))
    dev.sectors[2] = sealed[2]

    # Known gap: restoring an older ciphertext at the same index decrypts cleanly.
    old = sealed[1]
    dev.write(1, b"\xee" * storage.BLOCK_SIZE)
    dev.sectors[1] = old
    replay_accepted = dev.read(1) == b"\x02" * storage.BLOCK_SIZE

    ok = (data_hits == data_trials and tree_hits == tree_trials and intact and reloc_hits == reloc_trials
          and flip_hits == flip_trials and replay_accepted)
    verdict(5, ok, f"data {data_hits}/{data_trials}, tree {tree_hits}/{tree_trials}, "
                   f"relocation {reloc_hits}/{reloc_trials}, sector flips {flip_hits}/{flip_trials}, "
                   f"same-index replay accepted (known gap)={replay_accepted}")


def _shuffled(node, rng):
    if isinstance(node, dict):
        keys = list(node)
        rng.shuffle(keys)
        return {k: _shuffled(node[k], rng) for k in keys}
    if isinstance(node, list):
        return [_shuffled(v, rng) for v in node]
    return node


def test_6_measurement_tracks_content_not_layout(verdict):
    rng = random.Random(6)
    policies = [random_policy(rng) for _ in range(20)]
    unchanged = []
    for i in range(1000):
        base = policies[i % len(policies)]
        mutant, path = mutate_policy(rng, base)
        if measure_policy(mutant).digest == measure_policy(base).digest:
            unchanged.append(path)
    moved = 0
    layouts = 0
    for base in policies:
        digest = measure_policy(base).digest
        for _ in range(25):
            doc = _shuffled(policy_to_dict(base), rng)
            indent = rng.choice([None, 0, 1, 2, 4, "\t"])
            separators = rng.choice([(",", ":"), (", ", ": "), (" ,", " : ")])
            text = json.dumps(doc, indent=indent, separators=separators)
            text = rng.choice(["", " ", "\n", "\r\n\t"]) + text + rng.choice(["", "\n", "  \n"])
            layouts += 1
            if measure_policy(parse_policy(text)).digest != digest:
                moved += 1
    ok = not unchanged and moved == 0
    verdict(6, ok, f"{1000 - len(unchanged)}/1000 mutations changed the digest, "
                   f"{moved}/{layouts} layout permutations changed it")


def test_7_create_container_decision_latency(verdict):
    result = bench_enforce(templates=50, iterations=2000)
    ok = result.allowed and result.median_s < 1e-3
    verdict(7, ok, f"median {result.median_s * 1e3:.3f} ms, p95 {result.p95_s * 1e3:.3f} ms "
                   f"over {result.iterations} create_container calls on {result.templates} templates (limit 1 ms)")
