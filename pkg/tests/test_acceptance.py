"""Acceptance checks, one per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line; the same lines
are repeated in the pytest terminal summary. Run standalone with
``python tests/test_acceptance.py``.
"""

import filecmp
import json
import random
import sys
import time
from collections import Counter
from pathlib import Path

import pytest

from beatsim.contracts import ContractEngine, ContractKind
from beatsim.digest import canonical_json
from beatsim.ledger import load_chain, replay
from beatsim.recording import compute_receipt
from beatsim.scenario import (World, fixture_dir, list_fixtures, load_config, parse_config,
                              run_scenario, write_artifacts)

sys.path.insert(0, str(Path(__file__).parent))
from oracles import receipt_bytes, sha3_256  # noqa: E402

RESULTS = {}
SEEDS = range(100)
RUNTIME_LIMIT_S = 10.0


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# -- scenario generators ----------------------------------------------------------

def topology(name):
    return json.loads((fixture_dir() / "topologies" / f"{name}.json").read_text())


def generated(seed, topo, src, dst, rng, adversary=None, disputes=None, **extra):
    raw = {
        "name": f"gen-{seed}", "seed": seed, "topology": topo,
        "tenants": [{"tenant": "tenant", "src": src, "dst": dst, "flows": {
            "count": rng.randint(3, 40), "packets": [1, rng.randint(1, 6)],
            "gap_ms": rng.randint(2, 80), "packet_gap_ms": rng.randint(1, 5)}}],
        "disputes": disputes if disputes is not None else [
            {"tenant": "tenant", "delay_ms": rng.randint(16_000, 120_000)}],
        **extra,
    }
    if adversary:
        raw["adversary"] = adversary
    return parse_config(raw)


def jitter_links(topo, rng, loss):
    for link in topo["links"]:
        link["delay"] = rng.randint(1, 25)
        link["loss_prob"] = loss
    return topo


ENDPOINTS = {"fig5": ("T", "K"), "fig6": ("R1", "R3"), "fig7": ("T", "K")}


def honest_config(seed, lossy=True):
    rng = random.Random(f"honest:{seed}")
    name = rng.choice(sorted(ENDPOINTS))
    loss = rng.choice([0.0, 0.0, rng.uniform(0.01, 0.2)]) if lossy else 0.0
    topo = jitter_links(topology(name), rng, loss)
    for d in topo["devices"]:
        d["tamper_protected"] = rng.random() < 0.2
    return generated(seed, topo, *ENDPOINTS[name], rng)


def pathswap_config(seed):
    rng = random.Random(f"pathswap:{seed}")
    topo = jitter_links(topology("fig5"), rng, rng.choice([0.0, 0.0, rng.uniform(0.01, 0.1)]))
    adv = {"strategy": "PathSwap", "actor": "Y", "victim": "tenant", "cheap_path": ["T", "C", "K"]}
    return generated(seed, topo, "T", "K", rng, adv)


def replication_config(seed, honest_neighbours):
    """Replication on the fig7 topology; ``honest_neighbours`` of B's two route neighbours stay independent."""
    rng = random.Random(f"replication:{seed}:{honest_neighbours}")
    topo = jitter_links(topology("fig7"), rng, 0.0)
    captured = {0: {"Z", "F"}, 1: {rng.choice(["Z", "F"])}, 2: set()}[honest_neighbours]
    for d in topo["devices"]:
        if d["name"] in captured:
            d["owner"] = "Y"
    adv = {"strategy": "ProofReplication", "actor": "Y", "victim": "tenant",
           "cheap_path": ["T", "Z", "D", "F", "K"]}
    return generated(seed, topo, "T", "K", rng, adv)


# -- criteria -----------------------------------------------------------------------

_fixture_runs = {}


def fixture_run(name):
    if name not in _fixture_runs:
        cfg = load_config(name)
        started = time.perf_counter()
        world, summary = run_scenario(cfg)
        _fixture_runs[name] = (world, summary, time.perf_counter() - started)
    return _fixture_runs[name]


def test_criterion_1_determinism(tmp_path):
    diffs, slow = [], []
    for name in list_fixtures():
        world, summary, elapsed = fixture_run(name)
        a = write_artifacts(world, summary, tmp_path / name / "a")
        world2, summary2 = run_scenario(load_config(name))
        b = write_artifacts(world2, summary2, tmp_path / name / "b")
        files = sorted(str(p.relative_to(a)) for p in a.rglob("*") if p.is_file())
        other = sorted(str(p.relative_to(b)) for p in b.rglob("*") if p.is_file())
        _, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
        if files != other or mismatch or errors:
            diffs.append((name, mismatch or errors or "file sets differ"))
        if elapsed >= RUNTIME_LIMIT_S:
            slow.append((name, round(elapsed, 2)))
    worst = max(r[2] for r in _fixture_runs.values())
    report(1, not diffs and not slow,
           f"{len(list_fixtures())} scenarios byte-identical across reruns, "
           f"slowest run {worst:.2f}s (< {RUNTIME_LIMIT_S:.0f}s); diffs={diffs} slow={slow}")


def test_criterion_2_replication_and_replay():
    checked, problems = 0, []
    for name in list_fixtures():
        world, summary, _ = fixture_run(name)
        ledger = world.ledger
        if ledger.replication_checks != ledger.height or ledger.replication_mismatches:
            problems.append((name, "replica divergence during run"))
        if len({n.serialize() for n in ledger.nodes.values()}) != 1:
            problems.append((name, "replicas differ at end"))
        store, status = replay(load_chain(ledger.dump_chain()), ContractEngine(world.governance))
        if canonical_json(store) != canonical_json(ledger.reference.store):
            problems.append((name, "replay store differs"))
        if status != ledger.reference.tx_status:
            problems.append((name, "replay tx status differs"))
        checked += ledger.replication_checks
    report(2, not problems,
           f"{checked} per-block replica comparisons, 0 expected mismatches; "
           f"replay reproduced every store; problems={problems}")


def test_criterion_3_inclusion_latency():
    world, _, _ = fixture_run("paper_fig6")
    ledger = world.ledger
    interval = ledger.block_interval
    bad, n = [], 0
    for block in ledger.blocks[1:]:
        for tx in block.txs:
            n += 1
            lat = block.sealed_at - tx.submitted_at
            expected = interval - (tx.submitted_at % interval)
            if not (0 < lat <= interval) or lat != expected:
                bad.append((tx.tx_id.hex()[:12], tx.submitted_at, lat))
    ok = interval == 15_000 and n >= 1000 and not bad
    report(3, ok, f"{n} txs at interval {interval} ms, "
                  f"{len(bad)} off the interval - (submitted_at mod interval) law")


def test_criterion_4_recording_conservation():
    world, summary, _ = fixture_run("paper_fig6")
    flows = summary["flows"]["injected"]
    receipts = sum(len(world.contracts.qm_entries(qm)) for qm in world.contracts.qm_by_sla.values())
    hop_counts = Counter(h.node for h in world.network.hops)
    report_totals = {n: p.report.total() for n, p in world.processors.items()}
    packet_events = sum(1 for _, _, kind, _ in world.sim.log if kind == "packet")
    ok = (len(world.network.devices) == 3 and flows == 4000 and receipts == 2 * flows == 8000
          and report_totals == dict(hop_counts) and sum(report_totals.values()) == packet_events)
    report(4, ok, f"receipts={receipts} flows={flows}; report totals {report_totals} "
                  f"vs event-log hops {dict(sorted(hop_counts.items()))}")


def run_verdicts(cfg):
    _, summary = run_scenario(cfg)
    return summary["verdicts"], summary


def test_criterion_5_soundness():
    outcomes = Counter()
    accused = []
    for seed in SEEDS:
        verdicts, _ = run_verdicts(honest_config(seed))
        for v in verdicts:
            outcomes[v["outcome"]] += 1
            if v["outcome"] != "HonestAllocation":
                accused.append((seed, v["outcome"], v["reason"], v["culprits"]))
    total = sum(outcomes.values())
    report(5, total == len(SEEDS) and not accused,
           f"{total} honest disputes: {dict(outcomes)}; non-honest={accused[:5]}")


def test_criterion_6_completeness():
    fails = []
    swap = Counter()
    for seed in SEEDS:
        (v,), _ = run_verdicts(pathswap_config(seed))
        swap[v["outcome"]] += 1
        if v["outcome"] != "PathViolation" or v["culprits"] != [2, 3]:
            fails.append(("swap", seed, v["outcome"], v["culprits"]))
    repl = Counter()
    for seed in SEEDS:
        honest = 1 + seed % 2
        (v,), _ = run_verdicts(replication_config(seed, honest))
        repl[v["outcome"]] += 1
        if v["outcome"] != "ReplicatedProofs" or 3 not in v["culprits"]:
            fails.append(("replication", seed, honest, v["outcome"], v["culprits"]))
    captured = Counter()
    for seed in SEEDS:
        (v,), _ = run_verdicts(replication_config(seed, 0))
        captured[v["outcome"]] += 1
        if v["outcome"] != "Inconclusive":
            fails.append(("captured", seed, v["outcome"], v["culprits"]))
    report(6, not fails,
           f"PathSwap {dict(swap)}; ProofReplication with honest neighbour {dict(repl)}; "
           f"no honest neighbour {dict(captured)}; failures={fails[:5]}")


def test_criterion_7_eviction_boundary():
    too_old, kept, lost = 0, 0, []
    for seed in SEEDS:
        rng = random.Random(f"eviction:{seed}")
        threshold = rng.randint(40_000, 150_000)
        late = rng.choice([threshold + 1, rng.randint(threshold + 1, 3 * threshold)])
        early = rng.choice([threshold, rng.randint(16_000, threshold)])
        honest = rng.random() < 0.5
        topo = jitter_links(topology("fig5"), rng, 0.0)
        adv = None if honest else {"strategy": "PathSwap", "actor": "Y", "victim": "tenant",
                                   "cheap_path": ["T", "C", "K"]}
        cfg = generated(seed, topo, "T", "K", rng, adv,
                        disputes=[{"tenant": "tenant", "delay_ms": early},
                                  {"tenant": "tenant", "delay_ms": late}],
                        threshold_time_ms=threshold)
        world = World(cfg)
        collected = []
        original = world.interrogator.collect

        def spy(path, now, original=original):
            got = original(path, now)
            collected.append((now, got))
            return got

        world.interrogator.collect = spy
        summary = world.run()
        errors = {e["dispute_id"]: e["error"] for e in summary["dispute_errors"]}
        if errors.get("dispute-001") == "WindowTooOld":
            too_old += 1
        else:
            lost.append((seed, "late dispute accepted"))
        if "dispute-000" in errors or len(collected) != 1:
            lost.append((seed, "early dispute rejected"))
            continue
        now, got = collected[0]
        held = Counter((p.node, p.src_id, p.dst_id, p.tr) for ps in got.values() for p in ps)
        need = Counter((h.node, h.prev_hop, h.next_hop, h.tr) for h in world.network.hops
                       if now - h.tr <= threshold and h.node in got)
        missing = sum(max(0, c - held[k]) for k, c in need.items())
        if missing:
            lost.append((seed, f"{missing} retained-age proofs missing"))
        else:
            kept += 1
        verdict = summary["verdicts"][0]
        lo = world.windows["tenant"][0]
        if now - lo <= threshold:
            want = "HonestAllocation" if honest else "PathViolation"
            if verdict["outcome"] != want:
                lost.append((seed, f"verdict {verdict['outcome']} != {want}"))
    report(7, too_old == len(SEEDS) and kept == len(SEEDS) and not lost,
           f"late disputes WindowTooOld {too_old}/{len(SEEDS)}; in-threshold disputes with "
           f"full evidence {kept}/{len(SEEDS)}; problems={lost[:5]}")


def test_criterion_8_qos_oracle():
    worst, bad, checked = 0.0, [], 0
    for seed in SEEDS:
        cfg = honest_config(seed, lossy=False)
        world = World(cfg)
        summary = world.run()
        (v,) = summary["verdicts"]
        path = world.grants["tenant"].path
        for a, b in zip(path, path[1:]):
            q = v["qos"][str(a)]
            configured = world.network.link(a, b).delay
            for stat in ("delay_mean", "delay_max"):
                err = abs(q[stat] - configured)
                worst = max(worst, err)
                if err > 1:
                    bad.append((seed, a, stat, q[stat], configured))
            checked += 1
        for n in path:
            if v["qos"][str(n)]["loss"] != 0:
                bad.append((seed, n, "loss", v["qos"][str(n)]["loss"]))
    report(8, not bad, f"{checked} device delays over {len(SEEDS)} loss-free scenarios, "
                       f"max |error| {worst} ms (tolerance 1), nonzero loss or misses={bad[:5]}")


def test_criterion_9_hash_oracle():
    rng = random.Random(9)
    edge = [(0, 0, 0, 0), (2**64 - 1, 2**32 - 1, 2**32 - 1, 2**64 - 1)]
    cases = edge + [(rng.getrandbits(64), rng.getrandbits(32), rng.getrandbits(32),
                     rng.getrandbits(64)) for _ in range(1000)]
    mismatches = [c for c in cases
                  if compute_receipt(*c).digest != sha3_256(receipt_bytes(*c))]
    report(9, len(cases) >= 1000 and not mismatches,
           f"{len(cases)} operand tuples vs pure-Python SHA3-256 over the 24-byte encoding, "
           f"{len(mismatches)} mismatches")


if __name__ == "__main__":
    import tempfile
    failed = 0
    for name, fn in sorted((k, v) for k, v in globals().items() if k.startswith("test_criterion")):
        try:
            if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as d:
                    fn(Path(d))
            else:
                fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
