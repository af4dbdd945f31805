"""Scenario configuration, world assembly and artifact emission."""

import csv
import hashlib
import io
import json
import os
import statistics
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .contracts import ContractEngine, QosTargets, SlaContracts
from .interrogation import Dispute, Interrogator, WindowTooOld
from .ledger import Ledger
from .netsim import (CapacityExceeded, Flow, NoActiveSla, PathSwap,
                     ProofReplication, build_topology)
from .orchestration import ActorRecord, Granted, Orchestrator, ResourceRequest, Role
from .recording import DEFAULT_THRESHOLD_MS, PacketProcessor, proofs_to_jsonl
from .sim import Simulator

STRATEGIES = ("HonestForwarding", "PathSwap", "ProofReplication")


class ConfigError(Exception):
    """Invalid scenario configuration; ``field`` and ``line`` locate the problem."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass
class FlowSpec:
    count: int = 10
    packets: Tuple[int, int] = (1, 1)
    gap_ms: int = 50
    packet_gap_ms: int = 1


@dataclass
class TenantSpec:
    tenant: str
    src: str
    dst: str
    qos: QosTargets = field(default_factory=QosTargets)
    lease_ms: int = 600_000
    flows: FlowSpec = field(default_factory=FlowSpec)


@dataclass
class AdversarySpec:
    strategy: str = "HonestForwarding"
    actor: Optional[str] = None
    victim: Optional[str] = None
    cheap_path: Tuple[str, ...] = ()


@dataclass
class DisputeSpec:
    tenant: str
    delay_ms: int = 20_000
    window: Optional[Tuple[int, int]] = None  # absolute; default covers the tenant's traffic


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    topology: dict
    tenants: List[TenantSpec]
    block_interval_ms: int = 15_000
    threshold_time_ms: int = DEFAULT_THRESHOLD_MS
    access_check_ms: int = 4
    availability_check_ms: int = 4
    proof_write_ms: int = 1
    slack_ms: int = 50
    lease_delay_ms: int = 1000
    adversary: AdversarySpec = field(default_factory=AdversarySpec)
    disputes: List[DisputeSpec] = field(default_factory=list)
    output_dir: Optional[str] = None
    check_replication: bool = True
    topology_source: Optional[str] = None

    def describe(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "topology": self.topology_source,
            "block_interval_ms": self.block_interval_ms,
            "threshold_time_ms": self.threshold_time_ms,
            "access_check_ms": self.access_check_ms,
            "availability_check_ms": self.availability_check_ms,
            "proof_write_ms": self.proof_write_ms,
            "slack_ms": self.slack_ms,
            "lease_delay_ms": self.lease_delay_ms,
            "adversary": {"strategy": self.adversary.strategy, "actor": self.adversary.actor,
                          "victim": self.adversary.victim,
                          "cheap_path": list(self.adversary.cheap_path)},
            "tenants": [{"tenant": t.tenant, "src": t.src, "dst": t.dst, "lease_ms": t.lease_ms,
                         "flows": {"count": t.flows.count, "packets": list(t.flows.packets),
                                   "gap_ms": t.flows.gap_ms,
                                   "packet_gap_ms": t.flows.packet_gap_ms}}
                        for t in self.tenants],
            "disputes": [{"tenant": d.tenant, "delay_ms": d.delay_ms,
                          "window": list(d.window) if d.window else None} for d in self.disputes],
        }


# -- loading ------------------------------------------------------------------

def fixture_dir() -> Path:
    return Path(str(resources.files("beatsim") / "fixtures"))


def list_fixtures() -> List[str]:
    return sorted(p.stem for p in (fixture_dir() / "scenarios").glob("*.json"))


def resolve_config_path(ref: str) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    bundled = fixture_dir() / "scenarios" / (ref if ref.endswith(".json") else ref + ".json")
    if bundled.exists():
        return bundled
    raise ConfigError(f"no such config file or bundled fixture: {ref}")


def _read_json(path: Path):
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path.name}: {exc.msg}", line=exc.lineno) from None


def _int(d: dict, key: str, default=None, minimum: int = 0, prefix: str = "") -> int:
    if key not in d:
        if default is None:
            raise ConfigError("missing required value", field=prefix + key)
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"expected an integer, got {v!r}", field=prefix + key)
    if v < minimum:
        raise ConfigError(f"must be >= {minimum}", field=prefix + key)
    return v


def parse_config(raw: dict, base_dir: Optional[Path] = None) -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "seed" not in raw:
        raise ConfigError("a seed is mandatory", field="seed")
    seed = _int(raw, "seed")
    topo_ref = raw.get("topology")
    if isinstance(topo_ref, dict):
        topology, topo_source = topo_ref, "<inline>"
    elif isinstance(topo_ref, str):
        candidates = [Path(topo_ref)]
        if base_dir is not None:
            candidates.insert(0, base_dir / topo_ref)
        candidates.append(fixture_dir() / "topologies" / Path(topo_ref).name)
        found = next((c for c in candidates if c.exists()), None)
        if found is None:
            raise ConfigError(f"topology file not found: {topo_ref}", field="topology")
        topology, topo_source = _read_json(found), Path(topo_ref).name
    else:
        raise ConfigError("expected a file path or an inline object", field="topology")

    tenants = []
    for i, t in enumerate(raw.get("tenants", [])):
        pre = f"tenants[{i}]."
        for key in ("tenant", "src", "dst"):
            if key not in t:
                raise ConfigError("missing required value", field=pre + key)
        fl = t.get("flows", {})
        packets = fl.get("packets", 1)
        if isinstance(packets, int):
            packets = (packets, packets)
        if (not isinstance(packets, (list, tuple)) or len(packets) != 2
                or not all(isinstance(x, int) and x >= 1 for x in packets) or packets[0] > packets[1]):
            raise ConfigError("expected N or [min, max] with 1 <= min <= max", field=pre + "flows.packets")
        try:
            qos = QosTargets(**t.get("qos", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), field=pre + "qos") from None
        tenants.append(TenantSpec(
            tenant=t["tenant"], src=t["src"], dst=t["dst"], qos=qos,
            lease_ms=_int(t, "lease_ms", 600_000, 1, pre),
            flows=FlowSpec(count=_int(fl, "count", 10, 0, pre + "flows."), packets=tuple(packets),
                           gap_ms=_int(fl, "gap_ms", 50, 0, pre + "flows."),
                           packet_gap_ms=_int(fl, "packet_gap_ms", 1, 0, pre + "flows."))))
    if not tenants:
        raise ConfigError("at least one tenant is required", field="tenants")

    adv_raw = raw.get("adversary", {"strategy": "HonestForwarding"})
    strategy = adv_raw.get("strategy", "HonestForwarding")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}", field="adversary.strategy")
    adversary = AdversarySpec(strategy, adv_raw.get("actor"), adv_raw.get("victim"),
                              tuple(adv_raw.get("cheap_path", ())))
    if strategy != "HonestForwarding":
        for key in ("actor", "victim", "cheap_path"):
            if not adv_raw.get(key):
                raise ConfigError("required for this strategy", field=f"adversary.{key}")

    disputes = []
    for i, d in enumerate(raw.get("disputes", [])):
        if "tenant" not in d:
            raise ConfigError("missing required value", field=f"disputes[{i}].tenant")
        window = d.get("window")
        if window is not None:
            window = tuple(window)
        disputes.append(DisputeSpec(d["tenant"], _int(d, "delay_ms", 20_000, 0, f"disputes[{i}]."), window))

    cfg = ScenarioConfig(
        name=raw.get("name", "scenario"), seed=seed, topology=topology, tenants=tenants,
        block_interval_ms=_int(raw, "block_interval_ms", 15_000, 1),
        threshold_time_ms=_int(raw, "threshold_time_ms", DEFAULT_THRESHOLD_MS),
        access_check_ms=_int(raw, "access_check_ms", 4),
        availability_check_ms=_int(raw, "availability_check_ms", 4),
        proof_write_ms=_int(raw, "proof_write_ms", 1),
        slack_ms=_int(raw, "slack_ms", 50),
        lease_delay_ms=_int(raw, "lease_delay_ms", 1000),
        adversary=adversary, disputes=disputes, output_dir=raw.get("output_dir"),
        check_replication=bool(raw.get("check_replication", True)),
        topology_source=topo_source,
    )
    names = {d.get("name") for d in topology.get("devices", [])}
    for i, t in enumerate(cfg.tenants):
        for key in ("src", "dst"):
            if getattr(t, key) not in names:
                raise ConfigError(f"unknown device {getattr(t, key)!r}", field=f"tenants[{i}].{key}")
    for n in adversary.cheap_path:
        if n not in names:
            raise ConfigError(f"unknown device {n!r}", field="adversary.cheap_path")
    return cfg


def load_config(ref: str) -> ScenarioConfig:
    path = resolve_config_path(ref)
    return parse_config(_read_json(path), path.parent)


# -- world ----------------------------------------------------------------------

class World:
    """All entities of one scenario, wired to a single simulator."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        topo = cfg.topology
        self.sim = Simulator(cfg.seed)
        self.governance = next((a["id"] for a in topo.get("actors", [])
                                if a.get("role") == Role.GOVERNANCE.value), "governance")
        self.engine = ContractEngine(self.governance)
        self.ledger = Ledger(self.sim, self.engine, cfg.block_interval_ms,
                             check_replication=cfg.check_replication)
        self.contracts = SlaContracts(self.ledger, self.governance)
        self.orch = Orchestrator(self.sim, self.ledger, self.contracts, self.governance,
                                 cfg.access_check_ms, cfg.availability_check_ms)
        for a in topo.get("actors", []):
            if a.get("role") == Role.GOVERNANCE.value:
                continue
            self.orch.admit_member(self.governance, ActorRecord(a["id"], Role(a["role"]),
                                                                a.get("credentials", "")))
        self.network = build_topology(
            topo, assign_id=lambda d: self.orch.register_device(self.governance, d["owner"]))
        self.contracts.known_nodes = lambda n: n in self.network.devices
        auth = topo.get("authorities")
        self.orch.bind_network(self.network, None if auth is None
                               else [self.network.node_id(a) for a in auth])
        self.processors: Dict[int, PacketProcessor] = {
            n: PacketProcessor(n, cfg.threshold_time_ms, cfg.proof_write_ms,
                               dev.tamper_protected, self._submit_receipt)
            for n, dev in self.network.devices.items()}
        self.network.attach(self.sim, self.processors, self.orch.sla_active)
        self.interrogator = Interrogator(self.network, self.processors, self.contracts,
                                         self.governance, cfg.threshold_time_ms, cfg.slack_ms)
        self.grants: Dict[str, Granted] = {}
        self.windows: Dict[str, Tuple[int, int]] = {}
        self.lease: Dict[str, Tuple[int, int]] = {}
        self.rejected_flows: List[Tuple[str, str]] = []
        self.receipt_log: List[dict] = []
        self.dispute_errors: List[dict] = []
        self.end_time = 0

    def _submit_receipt(self, flow, receipt):
        qm = self.contracts.qm_by_sla[flow.sla_id]
        tx_id = self.contracts.qm_record(qm, receipt.digest, receipt.node)
        row = {"flow_id": flow.flow_id, **receipt.to_dict(), "tx_id": tx_id.hex(),
               "submitted_at": self.sim.now, "sealed_at": None}
        self.receipt_log.append(row)

        def sealed(height, at):
            row["sealed_at"] = at
            self.sim.metrics.sample("receipt_inclusion_ms", at, at - row["submitted_at"])

        self.contracts.watch(tx_id, sealed)

    def plan(self):
        cfg = self.cfg
        sim = self.sim
        self.ledger.start()
        self.contracts.deploy_contract("RO", self.governance)
        request_at = cfg.block_interval_ms
        grant_seal = self.ledger.next_seal_time(request_at + cfg.access_check_ms
                                                + cfg.availability_check_ms)
        lease_start = grant_seal + cfg.lease_delay_ms
        total_delay = sum(l.delay for l in self.network.links.values())
        end = lease_start
        for t in cfg.tenants:
            lease = (lease_start, lease_start + t.lease_ms)
            self.lease[t.tenant] = lease
            sim.schedule(request_at, "request", lambda ev, t=t, lease=lease: self._request(t, lease),
                         target=t.tenant)
            rng = sim.rng(f"flows:{t.tenant}")
            last = lease_start
            for i in range(t.flows.count):
                start = lease_start + i * t.flows.gap_ms
                packets = rng.randint(*t.flows.packets)
                src_ip = rng.getrandbits(32)
                dst_ip = rng.getrandbits(32)
                sim.schedule(start, "inject", lambda ev, t=t, i=i, p=packets, s=src_ip, d=dst_ip:
                             self._inject(t, i, p, s, d), target=f"{t.tenant}/{i}")
                last = max(last, start + (packets - 1) * t.flows.packet_gap_ms)
            window_end = last + total_delay + cfg.proof_write_ms
            if window_end > lease[1]:
                raise ConfigError("traffic outlasts the lease", field="lease_ms")
            self.windows[t.tenant] = (lease_start, window_end)
            end = max(end, window_end)
        for i, d in enumerate(cfg.disputes):
            if d.tenant not in self.windows:
                raise ConfigError(f"unknown tenant {d.tenant!r}", field=f"disputes[{i}].tenant")
            window = d.window or self.windows[d.tenant]
            at = window[1] + d.delay_ms
            sim.schedule(at, "dispute", lambda ev, i=i, d=d, w=window: self._dispute(i, d, w),
                         target=d.tenant)
            end = max(end, at)
        adv = cfg.adversary
        if adv.strategy != "HonestForwarding":
            cheap = tuple(self.network.node_id(n) for n in adv.cheap_path)
            self._pending_adversary = (adv, cheap)
        self.end_time = self.ledger.next_seal_time(end) + cfg.block_interval_ms

    def _request(self, t: TenantSpec, lease):
        req = ResourceRequest(t.tenant, self.network.node_id(t.src), self.network.node_id(t.dst),
                              t.qos, lease, self.sim.now)
        decision = self.orch.request_resources(req)
        if isinstance(decision, Granted):
            self.grants[t.tenant] = decision
            pending = getattr(self, "_pending_adversary", None)
            if pending and pending[0].victim == t.tenant:
                adv, cheap = pending
                if adv.strategy == "PathSwap":
                    strategy = PathSwap(decision.path, cheap)
                else:
                    strategy = ProofReplication(decision.path, cheap)
                self.network.apply_adversary(adv.actor, adv.victim, strategy)

    def _inject(self, t: TenantSpec, i: int, packets: int, src_ip: int, dst_ip: int):
        grant = self.grants.get(t.tenant)
        fid = f"{t.tenant}/{i:05d}"
        if grant is None:
            self.rejected_flows.append((fid, "NoGrant"))
            return
        flow = Flow(fid, grant.sla_id, t.tenant, src_ip, dst_ip, grant.path, packets,
                    self.sim.now, t.flows.packet_gap_ms)
        try:
            self.network.inject_flow(flow)
        except (NoActiveSla, CapacityExceeded) as exc:
            self.rejected_flows.append((fid, type(exc).__name__))

    def _dispute(self, i: int, d: DisputeSpec, window):
        grant = self.grants.get(d.tenant)
        did = f"dispute-{i:03d}"
        if grant is None:
            self.dispute_errors.append({"dispute_id": did, "error": "NoGrant"})
            return
        dispute = Dispute(did, grant.sla_id, d.tenant, self.sim.now, tuple(window))
        try:
            self.interrogator.initiate(dispute)
        except WindowTooOld as exc:
            self.dispute_errors.append({"dispute_id": did, "error": "WindowTooOld",
                                        "detail": str(exc)})

    def run(self) -> dict:
        self.plan()
        self.sim.run_until(self.end_time)
        return self.summary()

    # -- reporting -------------------------------------------------------------

    def qm_entry_count(self) -> int:
        return sum(len(self.contracts.qm_entries(qm)) for qm in self.contracts.qm_by_sla.values()
                   if self.contracts.is_callable(qm))

    def summary(self) -> dict:
        m = self.sim.metrics
        injected, delivered, dropped = self.network.conservation()

        def stats(values):
            if not values:
                return None
            return {"count": len(values), "mean": round(statistics.fmean(values), 3),
                    "min": min(values), "max": max(values)}

        try:
            orch = self.orch.report_metrics()
        except Exception:
            orch = None
        deploy = {k: [r["latency_ms"] for r in self.contracts.deploy_log if r["kind"] == k]
                  for k in ("RO", "QM")}
        return {
            "scenario": self.cfg.name,
            "config": self.cfg.describe(),
            "end_time_ms": self.end_time,
            "ledger": {
                "height": self.ledger.height,
                "transactions": sum(len(b.txs) for b in self.ledger.blocks),
                "head": self.ledger.blocks[-1].digest.hex(),
                "state_root": self.ledger.blocks[-1].state_root.hex(),
                "replication_checks": self.ledger.replication_checks,
                "replication_mismatches": self.ledger.replication_mismatches,
            },
            "deployment_latency_ms": {k: stats(v) for k, v in deploy.items()},
            "orchestration": orch,
            "decisions": [list(d) for d in self.orch.decisions],
            "flows": {"injected": len(self.network.flows),
                      "completed": sum(1 for h in self.network.flows.values() if h.done),
                      "rejected": len(self.rejected_flows)},
            "packets": {"injected": injected, "delivered": delivered, "dropped": dropped},
            "packet_processing": {
                "proof_write_ms": self.cfg.proof_write_ms,
                "receipt_inclusion_ms": stats(m.values("receipt_inclusion_ms")),
            },
            "receipts": {"submitted": len(self.receipt_log), "on_chain": self.qm_entry_count()},
            "proofs": {str(n): len(p.buffer) for n, p in sorted(self.processors.items())},
            "reports": {str(n): p.report.total() for n, p in sorted(self.processors.items())},
            "forged_proofs": len(self.network.forged),
            "capacity_violations": self.network.capacity_violations(),
            "verdicts": [v.to_dict() for v in self.interrogator.verdicts],
            "dispute_errors": self.dispute_errors,
        }


def run_scenario(cfg: ScenarioConfig) -> Tuple[World, dict]:
    world = World(cfg)
    summary = world.run()
    return world, summary


# -- artifacts -----------------------------------------------------------------------

def _csv(rows: List[dict], columns: List[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in rows)


def write_artifacts(world: World, summary: dict, out: Path) -> Path:
    out = Path(out)
    for sub in ("proofs", "reports", "verdicts"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    net = world.network
    files = {
        "summary.json": json.dumps(summary, indent=2) + "\n",
        "chain.jsonl": world.ledger.dump_chain(),
        "events.log": "\n".join(world.sim.log_lines()) + "\n",
        "hops.jsonl": _jsonl(h.to_dict() for h in net.hops),
        "forged.jsonl": _jsonl({"flow_id": f, "node": n, **p.to_dict()} for f, n, p in net.forged),
        "receipts.jsonl": _jsonl(world.receipt_log),
        "topology.json": json.dumps({
            "governance": world.governance,
            "threshold_time_ms": world.cfg.threshold_time_ms,
            "devices": [{"node": d.node, "name": d.name, "owner": d.owner, "vendor": d.vendor,
                         "capacity": d.capacity, "tamper_protected": d.tamper_protected}
                        for d in net.devices.values()],
            "links": [{"a": l.a, "b": l.b, "delay": l.delay, "loss_prob": l.loss_prob}
                      for l in net.links.values()],
        }, indent=2) + "\n",
        "nodes.json": json.dumps({
            str(nid): {"height": node.head.height, "head": node.head.digest.hex(),
                       "state_root": node.head.state_root.hex(),
                       "image_sha3": hashlib.sha3_256(node.serialize()).hexdigest()}
            for nid, node in sorted(world.ledger.nodes.items())}, indent=2) + "\n",
        "flows.csv": _csv([{"flow_id": h.flow.flow_id, "sla_id": h.flow.sla_id,
                            "assigned_path": "-".join(map(str, h.flow.assigned_path)),
                            "actual_path": "-".join(map(str, h.flow.actual_path)),
                            "packets": h.flow.packet_count, "delivered": h.delivered,
                            "dropped": h.dropped, "start_at": h.flow.start_at,
                            "completed_at": h.completed_at} for h in net.flows.values()],
                          ["flow_id", "sla_id", "assigned_path", "actual_path", "packets",
                           "delivered", "dropped", "start_at", "completed_at"]),
        "deployment_latency.csv": _csv(world.contracts.deploy_log,
                                       ["contract", "kind", "submitted_at", "sealed_at", "latency_ms"]),
        "orchestration_stages.csv": _csv(
            [{"request_at": t.request, "access_ms": t.access_ms,
              "availability_ms": t.availability_ms, "execution_ms": t.execution_ms,
              "total_ms": t.total} for t in world.orch.timings],
            ["request_at", "access_ms", "availability_ms", "execution_ms", "total_ms"]),
        "receipt_latency.csv": _csv(
            [{**r, "latency_ms": None if r["sealed_at"] is None else r["sealed_at"] - r["submitted_at"]}
             for r in world.receipt_log],
            ["flow_id", "node", "ts", "submitted_at", "sealed_at", "latency_ms", "digest"]),
    }
    for name, text in files.items():
        (out / name).write_text(text)
    for n, proc in sorted(world.processors.items()):
        (out / "proofs" / f"{n}.jsonl").write_text(proofs_to_jsonl(proc.buffer))
        (out / "reports" / f"{n}.json").write_text(json.dumps(proc.report.to_json(), indent=2) + "\n")
    for v in world.interrogator.verdicts:
        (out / "verdicts" / f"{v.dispute_id}.json").write_text(v.to_json())
    return out


def output_dir_for(cfg: ScenarioConfig, override: Optional[str] = None) -> Path:
    if override:
        return Path(override)
    env = os.environ.get("BEATSIM_OUTPUT_DIR")
    if env:
        return Path(env) / cfg.name
    return Path(cfg.output_dir or Path("out") / cfg.name)
