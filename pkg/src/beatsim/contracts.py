"""Native SLA contracts executed inside sealed blocks.

Two contract kinds live in the ledger's key/value store:

``RO``  resource orchestration: one instance holding every agreed SLA
        (tenant, route, QoS targets, lease) and dispute verdicts.
``QM``  QoS monitoring: one instance per SLA, an append-only list of 32-byte
        flow receipts written by the first and last device of the route.
"""

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

from .digest import DIGEST_SIZE, digest_fields
from .ledger import GOVERNANCE_NODE, Ledger, Transaction, TxKind, UnknownContract


class ContractError(Exception):
    pass


class NotGovernance(ContractError):
    pass


class NotAuthorized(ContractError):
    pass


class PathUnknown(ContractError):
    pass


class BadLease(ContractError):
    pass


class NotEndpoint(ContractError):
    pass


class UnknownSla(ContractError):
    pass


class BadCall(ContractError):
    pass


class ContractKind(str, Enum):
    RO = "RO"
    QM = "QM"


class SlaStatus(str, Enum):
    PENDING = "Pending"
    ACTIVE = "Active"
    COMPLETED = "Completed"
    DISPUTED = "Disputed"


@dataclass(frozen=True)
class QosTargets:
    min_throughput: float = 0.0  # packets/sec
    max_loss_fraction: float = 1.0
    max_latency: int = 10**9  # ms

    def __post_init__(self):
        if self.min_throughput < 0 or self.max_latency < 0 or self.max_loss_fraction < 0:
            raise ValueError("QoS targets must be non-negative")
        if self.max_loss_fraction > 1:
            raise ValueError("max_loss_fraction must be <= 1")


@dataclass
class RoSla:
    sla_id: str
    tenant: str
    owner: str
    path: Tuple[int, ...]
    qos: QosTargets
    lease_start: int
    lease_end: int
    status: SlaStatus = SlaStatus.PENDING

    def to_dict(self) -> dict:
        d = asdict(self)
        d["path"] = list(self.path)
        d["status"] = self.status.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoSla":
        return cls(d["sla_id"], d["tenant"], d["owner"], tuple(d["path"]), QosTargets(**d["qos"]),
                   d["lease_start"], d["lease_end"], SlaStatus(d["status"]))

    def status_at(self, now: int) -> SlaStatus:
        """Status as of ``now``, applying lease-driven transitions not yet sealed."""
        status = self.status
        if status is SlaStatus.PENDING and self.lease_start <= now:
            status = SlaStatus.ACTIVE
        if status is SlaStatus.ACTIVE and self.lease_end <= now:
            status = SlaStatus.COMPLETED
        return status

    @property
    def endpoints(self) -> Tuple[int, int]:
        return self.path[0], self.path[-1]


def contract_id(deployer: str, kind: ContractKind, tx_id: bytes) -> str:
    return digest_fields(deployer, ContractKind(kind).value, tx_id).hex()


def sla_key(sla_id: str) -> str:
    return f"sla/{sla_id}"


def entry_key(index: int) -> str:
    return f"entry/{index:08d}"


def _validate_sla(sla: RoSla):
    if not sla.path:
        raise PathUnknown("empty path")
    if sla.lease_start >= sla.lease_end:
        raise BadLease(f"lease [{sla.lease_start}, {sla.lease_end}] is empty")


class ContractEngine:
    """Deterministic executor plugged into every ledger node.

    Only pure functions of ``(store, tx, block_time)``: replaying the chain on a
    fresh store reproduces the exact same state.
    """

    def __init__(self, governance: str):
        self.governance = governance

    def on_block(self, store: dict, now: int):
        for cid in sorted(store):
            contract = store[cid]
            if contract["kind"] != ContractKind.RO.value:
                continue
            state = contract["state"]
            for key in sorted(k for k in state if k.startswith("sla/")):
                sla = RoSla.from_dict(state[key])
                if sla.status in (SlaStatus.PENDING, SlaStatus.ACTIVE):
                    new = sla.status_at(now)
                    if new is not sla.status:
                        sla.status = new
                        state[key] = sla.to_dict()

    def apply_tx(self, store: dict, tx: Transaction, now: int):
        call = tx.call
        if tx.kind is TxKind.DEPLOY:
            self._deploy(store, tx, call)
            return
        cid = call.get("contract")
        if cid not in store:
            raise BadCall(f"unknown contract {cid}")
        contract = store[cid]
        method = getattr(self, f"_{contract['kind'].lower()}_{call.get('method')}", None)
        if method is None:
            raise BadCall(f"{contract['kind']} has no method {call.get('method')!r}")
        method(store, contract["state"], call.get("args", {}), now)

    def _deploy(self, store: dict, tx: Transaction, call: dict):
        kind = ContractKind(call["kind"])
        deployer = call["deployer"]
        if deployer != self.governance:
            raise NotGovernance(deployer)
        cid = contract_id(deployer, kind, tx.tx_id)
        state = {}
        if kind is ContractKind.QM:
            state = {"sla_id": call["params"]["sla_id"],
                     "ro_contract": call["params"]["ro_contract"], "count": 0}
        store[cid] = {"kind": kind.value, "deployer": deployer,
                      "deploy_tx": tx.tx_id.hex(), "state": state}

    def _ro_execute(self, store, state, args, now):
        sla = RoSla.from_dict(args["sla"])
        _validate_sla(sla)
        if sla.status is not SlaStatus.PENDING:
            raise BadCall("SLA must be submitted as Pending")
        key = sla_key(sla.sla_id)
        if key in state:
            raise BadCall(f"duplicate sla {sla.sla_id}")
        sla.status = sla.status_at(now)
        state[key] = sla.to_dict()

    def _ro_record_verdict(self, store, state, args, now):
        key = sla_key(args["sla_id"])
        if key not in state:
            raise UnknownSla(args["sla_id"])
        state[f"verdict/{args['dispute_id']}"] = {**args, "recorded_at": now}
        sla = RoSla.from_dict(state[key])
        if args.get("violation") and sla.status_at(now) is SlaStatus.ACTIVE:
            sla.status = SlaStatus.DISPUTED
            state[key] = sla.to_dict()

    def _qm_record(self, store, state, args, now):
        digest = bytes.fromhex(args["digest"])
        if len(digest) != DIGEST_SIZE:
            raise BadCall("receipt digest must be 32 bytes")
        ro_state = store[state["ro_contract"]]["state"]
        raw = ro_state.get(sla_key(state["sla_id"]))
        if raw is None:
            raise UnknownSla(state["sla_id"])
        sla = RoSla.from_dict(raw)
        if args["recorder"] not in sla.endpoints:
            raise NotEndpoint(args["recorder"])
        if sla.status_at(now) is SlaStatus.PENDING:
            raise BadCall("SLA not yet active")
        index = state["count"]
        state[entry_key(index)] = {"digest": args["digest"], "recorder": args["recorder"],
                                   "recorded_at": now}
        state["count"] = index + 1


@dataclass
class QmEntry:
    digest: bytes
    recorder: int
    recorded_at: int


class SlaContracts:
    """Client-side facade: validates calls, submits transactions, tracks latency."""

    def __init__(self, ledger: Ledger, governance: str, orchestrator: Optional[str] = None,
                 known_nodes: Optional[Callable[[int], bool]] = None):
        self.ledger = ledger
        self.governance = governance
        self.orchestrator = orchestrator or governance
        self.known_nodes = known_nodes or (lambda node: True)
        self.ro_contract: Optional[str] = None
        self._deploys: Dict[bytes, Tuple[str, str, int]] = {}
        self._watch: Dict[bytes, Callable[[int, int], None]] = {}
        self.deploy_log: List[dict] = []
        self.qm_by_sla: Dict[str, str] = {}
        ledger.on_seal(self._on_seal)

    # -- submission -----------------------------------------------------

    def watch(self, tx_id: bytes, fn: Callable[[int, int], None]):
        """Call ``fn(height, sealed_at)`` when ``tx_id`` is sealed."""
        self._watch[tx_id] = fn

    def deploy_contract(self, kind, deployer: str, params: Optional[dict] = None) -> str:
        kind = ContractKind(kind)
        if deployer != self.governance:
            raise NotGovernance(deployer)
        call = {"kind": kind.value, "deployer": deployer, "params": params or {}}
        tx = self.ledger.submit(GOVERNANCE_NODE, TxKind.DEPLOY, call)
        cid = contract_id(deployer, kind, tx.tx_id)
        self._deploys[tx.tx_id] = (cid, kind.value, tx.submitted_at)
        if kind is ContractKind.RO and self.ro_contract is None:
            self.ro_contract = cid
        if kind is ContractKind.QM:
            self.qm_by_sla[params["sla_id"]] = cid
        return cid

    def _call(self, contract: str, method: str, args: dict, node: int = GOVERNANCE_NODE) -> Transaction:
        return self.ledger.submit(node, TxKind.CALL,
                                  {"contract": contract, "method": method, "args": args})

    def ro_execute(self, contract: str, sla: RoSla, caller: str,
                   on_included: Optional[Callable[[int, int], None]] = None) -> str:
        if caller not in (self.orchestrator, self.governance):
            raise NotAuthorized(caller)
        if not sla.path or not all(self.known_nodes(n) for n in sla.path):
            raise PathUnknown(sla.path)
        _validate_sla(sla)
        if sla.status is not SlaStatus.PENDING:
            raise BadCall("SLA must be Pending")
        self._require_contract(contract)
        tx = self._call(contract, "execute", {"sla": sla.to_dict()})
        if on_included is not None:
            self.watch(tx.tx_id, on_included)
        return sla.sla_id

    def qm_record(self, contract: str, digest: bytes, recorder: int) -> bytes:
        if len(digest) != DIGEST_SIZE:
            raise BadCall("receipt digest must be 32 bytes")
        meta = self._require_contract(contract)
        sla = self.get_sla(meta["state"]["sla_id"])
        if sla is None or sla.status_at(self.ledger.sim.now) is SlaStatus.PENDING:
            raise UnknownSla(meta["state"]["sla_id"])
        if recorder not in sla.endpoints:
            raise NotEndpoint(recorder)
        tx = self._call(contract, "record", {"digest": digest.hex(), "recorder": recorder},
                        node=recorder)
        return tx.tx_id

    def record_verdict(self, summary: dict) -> bytes:
        tx = self._call(self.ro_contract, "record_verdict", summary)
        return tx.tx_id

    def _require_contract(self, contract: str) -> dict:
        store = self.ledger.reference.store
        if contract not in store:
            raise UnknownContract(contract)
        return store[contract]

    def _on_seal(self, block):
        for tx in block.txs:
            dep = self._deploys.pop(tx.tx_id, None)
            if dep is not None:
                cid, kind, submitted = dep
                latency = block.sealed_at - submitted
                self.deploy_log.append({"contract": cid, "kind": kind, "submitted_at": submitted,
                                        "sealed_at": block.sealed_at, "latency_ms": latency})
                self.ledger.sim.metrics.sample(f"deploy_latency.{kind}", block.sealed_at, latency)
            fn = self._watch.pop(tx.tx_id, None)
            if fn is not None:
                fn(block.height, block.sealed_at)

    # -- queries ----------------------------------------------------------

    def is_callable(self, contract: str) -> bool:
        return contract in self.ledger.reference.store

    def get_sla(self, sla_id: str, node: Optional[int] = None) -> Optional[RoSla]:
        if self.ro_contract is None or not self.is_callable(self.ro_contract):
            return None
        raw = self.ledger.query_state(self.ro_contract, sla_key(sla_id), node)
        return None if raw is None else RoSla.from_dict(raw)

    def qm_entries(self, contract: str, node: Optional[int] = None) -> List[QmEntry]:
        count = self.ledger.query_state(contract, "count", node) or 0
        out = []
        for i in range(count):
            e = self.ledger.query_state(contract, entry_key(i), node)
            out.append(QmEntry(bytes.fromhex(e["digest"]), e["recorder"], e["recorded_at"]))
        return out
