"""Orchestration layer: member admission, access control, network log and
the three-stage resource request pipeline."""

import statistics
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .contracts import QosTargets, RoSla, SlaContracts
from .ledger import GOVERNANCE_NODE, Ledger


class OrchestrationError(Exception):
    pass


class NotGovernance(OrchestrationError):
    pass


class AlreadyAdmitted(OrchestrationError):
    pass


class NoSamples(OrchestrationError):
    pass


class Role(str, Enum):
    OWNER = "Owner"
    TENANT = "Tenant"
    BOTH = "Both"
    VENDOR = "Vendor"
    GOVERNANCE = "Governance"


@dataclass
class ActorRecord:
    actor_id: str
    role: Role
    credentials: str = ""
    admitted: bool = False
    blacklisted: bool = False
    devices: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.role = Role(self.role)

    @property
    def may_lease(self) -> bool:
        return self.role in (Role.TENANT, Role.BOTH)


@dataclass
class ResourceRequest:
    tenant: str
    src: int
    dst: int
    qos: QosTargets
    lease: Tuple[int, int]
    requested_at: int


@dataclass(frozen=True)
class Granted:
    sla_id: str
    path: Tuple[int, ...]


@dataclass(frozen=True)
class Wait:
    reason: str = "CapacityUnavailable"


@dataclass(frozen=True)
class Denied:
    reason: str


Decision = Union[Granted, Wait, Denied]


@dataclass
class NetworkLogEntry:
    device: int
    active_flows: int
    reserved: int
    path_loads: Dict[Tuple[int, ...], int]


class NetworkLog:
    """Per-device SLA reservations and per-path active SLA counts."""

    def __init__(self, network):
        self.network = network
        self.reserved: Dict[int, int] = {n: 0 for n in network.devices}
        self.path_loads: Dict[Tuple[int, ...], int] = {}
        self.snapshots: List[dict] = []

    def spare(self, node: int) -> int:
        return self.network.devices[node].capacity - self.reserved[node]

    def path_load(self, path: Sequence[int]) -> int:
        # number of active SLAs sharing at least one device with ``path``
        devices = set(path)
        return sum(n for p, n in self.path_loads.items() if devices & set(p))

    def reserve(self, path: Tuple[int, ...]):
        for n in path:
            self.reserved[n] += 1
        self.path_loads[path] = self.path_loads.get(path, 0) + 1

    def release(self, path: Tuple[int, ...]):
        for n in path:
            self.reserved[n] -= 1
        self.path_loads[path] -= 1
        if not self.path_loads[path]:
            del self.path_loads[path]

    def entry(self, node: int) -> NetworkLogEntry:
        return NetworkLogEntry(node, self.network.devices[node].active_flows, self.reserved[node],
                               {p: n for p, n in self.path_loads.items() if node in p})


@dataclass
class StageTiming:
    request: int
    access_ms: int
    availability_ms: int
    execution_ms: Optional[int] = None

    @property
    def total(self) -> Optional[int]:
        if self.execution_ms is None:
            return None
        return self.access_ms + self.availability_ms + self.execution_ms


class Orchestrator:
    def __init__(self, sim, ledger: Ledger, contracts: SlaContracts, governance: str,
                 access_check_ms: int = 4, availability_check_ms: int = 4, max_hops: int = 8):
        self.sim = sim
        self.ledger = ledger
        self.contracts = contracts
        self.governance = governance
        self.access_check_ms = access_check_ms
        self.availability_check_ms = availability_check_ms
        self.max_hops = max_hops
        self.actors: Dict[str, ActorRecord] = {
            governance: ActorRecord(governance, Role.GOVERNANCE, admitted=True)}
        self._next_node = 1
        self.network = None
        self.log: Optional[NetworkLog] = None
        self.slas: Dict[str, RoSla] = {}
        self.timings: List[StageTiming] = []
        self.decisions: List[Tuple[int, str, str]] = []
        self._sla_seq = 0
        if GOVERNANCE_NODE not in ledger.nodes:
            ledger.add_member(GOVERNANCE_NODE, authority=False)

    # -- governance ---------------------------------------------------------

    def _require_governance(self, actor: str):
        rec = self.actors.get(actor)
        if rec is None or rec.role is not Role.GOVERNANCE:
            raise NotGovernance(actor)

    def admit_member(self, gov: str, new: ActorRecord, devices: Sequence[str] = ()) -> Dict[str, int]:
        """Admit an actor; contributed devices get fresh node ids (1, 2, ...)."""
        self._require_governance(gov)
        if new.actor_id in self.actors:
            raise AlreadyAdmitted(new.actor_id)
        new.admitted = True
        self.actors[new.actor_id] = new
        assigned = {}
        for name in devices:
            assigned[name] = self._next_node
            new.devices.append(self._next_node)
            self._next_node += 1
        return assigned

    def register_device(self, gov: str, owner: str) -> int:
        """Assign the next node id to a device contributed by ``owner``."""
        self._require_governance(gov)
        rec = self.actors.get(owner)
        if rec is None or not rec.admitted:
            raise OrchestrationError(f"owner {owner} is not admitted")
        node = self._next_node
        self._next_node += 1
        rec.devices.append(node)
        return node

    def blacklist(self, gov: str, actor_id: str):
        self._require_governance(gov)
        rec = self.actors[actor_id]
        rec.blacklisted = True
        for node in rec.devices:
            self.ledger.blacklist(node)

    def bind_network(self, network, authorities: Optional[Sequence[int]] = None):
        """Pair every device with a ledger node."""
        self.network = network
        self.log = NetworkLog(network)
        auth = set(network.devices if authorities is None else authorities)
        for node in sorted(network.devices):
            if node not in self.ledger.nodes:
                self.ledger.add_member(node, authority=node in auth)

    # -- requests -------------------------------------------------------------

    def _access_ok(self, tenant: str) -> Optional[str]:
        rec = self.actors.get(tenant)
        if rec is None or not rec.admitted:
            return "NoAgreement"
        if rec.blacklisted:
            return "Blacklisted"
        if not rec.may_lease:
            return "NotTenant"
        return None

    def _admissible(self, path: Tuple[int, ...], qos: QosTargets) -> bool:
        if any(self.log.spare(n) <= 0 for n in path):
            return False
        if any(self.actors.get(self.network.devices[n].owner, None) is not None
               and self.actors[self.network.devices[n].owner].blacklisted for n in path):
            return False
        return self.network.path_delay(path) <= qos.max_latency

    def select_path(self, src: int, dst: int, qos: QosTargets) -> Tuple[Optional[Tuple[int, ...]], bool]:
        """Least-loaded admissible path; ties go to the smallest node-id sequence.

        Returns ``(path, route_exists)``.
        """
        candidates = list(self.network.simple_paths(src, dst, self.max_hops))
        admissible = [p for p in candidates if self._admissible(p, qos)]
        if not admissible:
            return None, bool(candidates)
        return min(admissible, key=lambda p: (self.log.path_load(p), p)), True

    def request_resources(self, req: ResourceRequest) -> Decision:
        now = self.sim.now
        denial = self._access_ok(req.tenant)
        if denial is None and (req.src == req.dst or req.src not in self.network.devices
                               or req.dst not in self.network.devices):
            denial = "BadEndpoints"
        if denial is None and not (now < req.lease[0] < req.lease[1]):
            denial = "BadLease"
        if denial is not None:
            return self._decide(req, Denied(denial))
        path, route_exists = self.select_path(req.src, req.dst, req.qos)
        if path is None:
            return self._decide(req, Wait() if route_exists else Denied("NoRoute"))

        self._sla_seq += 1
        sla = RoSla(f"sla-{self._sla_seq:04d}", req.tenant, self.governance, path, req.qos,
                    req.lease[0], req.lease[1])
        self.log.snapshots.append({
            "at": now, "sla_id": sla.sla_id, "path": list(path),
            "spare": {n: self.log.spare(n) for n in path}})
        self.log.reserve(path)
        self.slas[sla.sla_id] = sla
        timing = StageTiming(now, self.access_check_ms, self.availability_check_ms)
        self.timings.append(timing)
        submit_at = now + self.access_check_ms + self.availability_check_ms
        self.sim.schedule(submit_at, "ro_execute", lambda ev: self._execute(sla, timing),
                          target=sla.sla_id)
        self.sim.schedule(max(req.lease[1], submit_at), "lease_end",
                          lambda ev: self.log.release(path), target=sla.sla_id)
        return self._decide(req, Granted(sla.sla_id, path))

    def _execute(self, sla: RoSla, timing: StageTiming):
        submitted = self.sim.now

        def included(height, sealed_at):
            timing.execution_ms = sealed_at - submitted
            self.sim.metrics.sample("orchestration.execution_ms", sealed_at, timing.execution_ms)

        self.contracts.ro_execute(self.contracts.ro_contract, sla, self.governance, on_included=included)
        self.contracts.deploy_contract("QM", self.governance,
                                       {"sla_id": sla.sla_id, "ro_contract": self.contracts.ro_contract})

    def _decide(self, req: ResourceRequest, decision: Decision) -> Decision:
        self.decisions.append((self.sim.now, req.tenant, type(decision).__name__))
        self.sim.metrics.incr(f"orchestration.{type(decision).__name__.lower()}")
        return decision

    def report_metrics(self) -> dict:
        done = [t for t in self.timings if t.execution_ms is not None]
        if not done:
            raise NoSamples("no completed resource requests")

        def summary(values):
            return {"count": len(values), "mean": statistics.fmean(values),
                    "min": min(values), "max": max(values)}

        return {
            "access_ms": summary([t.access_ms for t in done]),
            "availability_ms": summary([t.availability_ms for t in done]),
            "execution_ms": summary([t.execution_ms for t in done]),
            "total_ms": summary([t.total for t in done]),
        }

    def sla_active(self, flow, now: int) -> bool:
        """Admission check used by the network before injecting a flow."""
        sla = self.contracts.get_sla(flow.sla_id)
        if sla is None or sla.tenant != flow.tenant or sla.path != flow.assigned_path:
            return False
        rec = self.actors.get(flow.tenant)
        if rec is None or rec.blacklisted:
            return False
        return sla.status_at(now).value == "Active"
