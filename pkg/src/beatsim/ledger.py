"""Permissioned ledger with round-robin proof-of-authority block production.

Every device hosts a :class:`LedgerNode`. A fixed authority subset seals one
block every ``block_interval_ms``; every node (including read replicas) applies
each block by re-executing its transactions, and checks the resulting state
root against the one the producer committed to.
"""

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from .digest import DIGEST_SIZE, canonical_json, digest_fields, sha3

EDGE = 0
GOVERNANCE_NODE = 2**64 - 1
ZERO_DIGEST = bytes(DIGEST_SIZE)


class LedgerError(Exception):
    pass


class NotMember(LedgerError):
    pass


class Blacklisted(LedgerError):
    pass


class UnknownContract(LedgerError):
    pass


class IntegrityError(LedgerError):
    pass


class TxKind(str, Enum):
    DEPLOY = "ContractDeploy"
    CALL = "ContractCall"


@dataclass(frozen=True)
class Transaction:
    submitter: int
    kind: TxKind
    payload: bytes
    submitted_at: int
    tx_id: bytes = field(init=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", TxKind(self.kind))
        object.__setattr__(
            self, "tx_id",
            digest_fields(self.submitter, self.kind.value, self.payload, self.submitted_at))

    @classmethod
    def build(cls, submitter: int, kind: TxKind, call: dict, submitted_at: int) -> "Transaction":
        return cls(submitter, kind, canonical_json(call), submitted_at)

    @property
    def call(self) -> dict:
        return json.loads(self.payload)

    def sort_key(self) -> Tuple[int, bytes]:
        return (self.submitted_at, self.tx_id)

    def to_dict(self) -> dict:
        return {
            "tx_id": self.tx_id.hex(),
            "submitter": self.submitter,
            "kind": self.kind.value,
            "payload": self.call,
            "submitted_at": self.submitted_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Transaction":
        tx = cls.build(d["submitter"], TxKind(d["kind"]), d["payload"], d["submitted_at"])
        if "tx_id" in d and tx.tx_id.hex() != d["tx_id"]:
            raise IntegrityError(f"tx_id mismatch for {d['tx_id']}")
        return tx


@dataclass(frozen=True)
class Block:
    height: int
    producer: int
    parent: bytes
    sealed_at: int
    txs: Tuple[Transaction, ...]
    state_root: bytes

    @property
    def digest(self) -> bytes:
        return digest_fields(self.height, self.producer, self.parent, self.sealed_at,
                             *(tx.tx_id for tx in self.txs), self.state_root)

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "producer": self.producer,
            "parent_hex": self.parent.hex(),
            "sealed_at": self.sealed_at,
            "txs": [tx.to_dict() for tx in self.txs],
            "state_root": self.state_root.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Block":
        return cls(
            height=d["height"], producer=d["producer"], parent=bytes.fromhex(d["parent_hex"]),
            sealed_at=d["sealed_at"], txs=tuple(Transaction.from_dict(t) for t in d["txs"]),
            state_root=bytes.fromhex(d["state_root"]),
        )


def state_root(store: dict, status: dict) -> bytes:
    return sha3(canonical_json({"status": status, "store": store}))


def genesis_block(genesis_time: int = 0) -> Block:
    return Block(0, EDGE, ZERO_DIGEST, genesis_time, (), state_root({}, {}))


class LedgerNode:
    """One replica of the chain and of the contract key/value state."""

    def __init__(self, node_id: int, genesis: Block, executor):
        self.node_id = node_id
        self.executor = executor
        self.blocks: List[Block] = [genesis]
        self.store: dict = {}
        self.tx_status: Dict[str, str] = {}
        self.pending: Dict[bytes, Transaction] = {}

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    def _execute(self, txs: Iterable[Transaction], sealed_at: int) -> bytes:
        self.executor.on_block(self.store, sealed_at)
        for tx in txs:
            try:
                self.executor.apply_tx(self.store, tx, sealed_at)
                self.tx_status[tx.tx_id.hex()] = "ok"
            except Exception as exc:  # a reverted call never aborts the block
                self.tx_status[tx.tx_id.hex()] = f"reverted:{type(exc).__name__}"
        return state_root(self.store, self.tx_status)

    def produce(self, sealed_at: int) -> Block:
        txs = sorted((tx for tx in self.pending.values() if tx.submitted_at < sealed_at),
                     key=Transaction.sort_key)
        head = self.head
        root = self._execute(txs, sealed_at)
        block = Block(head.height + 1, self.node_id, head.digest, sealed_at, tuple(txs), root)
        self._append(block)
        return block

    def apply_block(self, block: Block):
        head = self.head
        if block.height != head.height + 1 or block.parent != head.digest:
            raise IntegrityError(f"node {self.node_id}: block {block.height} does not extend head")
        root = self._execute(block.txs, block.sealed_at)
        if root != block.state_root:
            raise IntegrityError(f"node {self.node_id}: state root mismatch at {block.height}")
        self._append(block)

    def _append(self, block: Block):
        self.blocks.append(block)
        for tx in block.txs:
            self.pending.pop(tx.tx_id, None)

    def query(self, contract: str, key: str):
        if contract not in self.store:
            raise UnknownContract(contract)
        return self.store[contract]["state"].get(key)

    def serialize(self) -> bytes:
        return canonical_json({
            "blocks": [b.digest.hex() for b in self.blocks],
            "pending": sorted(tx.tx_id.hex() for tx in self.pending.values()),
            "status": self.tx_status,
            "store": self.store,
        })


def producer_for(authorities: List[int], height: int) -> int:
    # height 1 goes to the first authority
    return authorities[(height - 1) % len(authorities)]


class Ledger:
    """Replicated chain driven by the simulator clock."""

    def __init__(self, sim, executor, block_interval_ms: int = 15000, genesis_time: int = 0,
                 check_replication: bool = False):
        if block_interval_ms <= 0:
            raise ValueError("block_interval_ms must be positive")
        self.sim = sim
        self.executor = executor
        self.block_interval = block_interval_ms
        self.genesis = genesis_block(genesis_time)
        self.nodes: Dict[int, LedgerNode] = {}
        self.authorities: List[int] = []
        self.blacklisted: set = set()
        self.check_replication = check_replication
        self.replication_checks = 0
        self.replication_mismatches = 0
        self.inclusion: Dict[bytes, Tuple[int, int]] = {}
        self._listeners: List[Callable[[Block], None]] = []
        self._seal_event: Optional[int] = None

    def add_member(self, node_id: int, authority: bool = True) -> LedgerNode:
        if node_id in self.nodes:
            raise LedgerError(f"node {node_id} already a member")
        node = LedgerNode(node_id, self.genesis, self.executor)
        # late joiners sync by replaying the chain
        for block in self.reference.blocks[1:] if self.nodes else ():
            node.apply_block(block)
        if self.nodes:
            node.pending = dict(self.reference.pending)
        self.nodes[node_id] = node
        if authority:
            self.authorities.append(node_id)
        return node

    def blacklist(self, node_id: int):
        self.blacklisted.add(node_id)
        if node_id in self.authorities:
            self.authorities.remove(node_id)

    @property
    def reference(self) -> LedgerNode:
        if GOVERNANCE_NODE in self.nodes:
            return self.nodes[GOVERNANCE_NODE]
        return self.nodes[min(self.nodes)]

    @property
    def blocks(self) -> List[Block]:
        return self.reference.blocks

    @property
    def height(self) -> int:
        return self.reference.head.height

    def on_seal(self, fn: Callable[[Block], None]):
        self._listeners.append(fn)

    def next_seal_time(self, t: int) -> int:
        """First seal instant strictly after ``t``."""
        g = self.genesis.sealed_at
        if t < g:
            return g + self.block_interval
        return g + ((t - g) // self.block_interval + 1) * self.block_interval

    def start(self):
        if not self.authorities:
            raise LedgerError("no authorities configured")
        first = self.next_seal_time(self.sim.now)
        self._seal_event = self.sim.schedule(first, "seal", self._on_seal_event, target="ledger")

    def _on_seal_event(self, ev):
        self.seal_block()
        nxt = self.sim.now + self.block_interval
        self._seal_event = self.sim.schedule(nxt, "seal", self._on_seal_event, target="ledger")

    def submit_tx(self, node: int, tx: Transaction) -> bytes:
        if node in self.blacklisted:
            raise Blacklisted(f"node {node} is blacklisted")
        if node not in self.nodes:
            raise NotMember(f"node {node} is not a ledger member")
        if tx.submitter != node:
            raise LedgerError("submitter field does not match submitting node")
        for n in self.nodes.values():
            n.pending[tx.tx_id] = tx
        return tx.tx_id

    def submit(self, node: int, kind: TxKind, call: dict) -> Transaction:
        tx = Transaction.build(node, kind, call, self.sim.now)
        self.submit_tx(node, tx)
        return tx

    def seal_block(self) -> Block:
        height = self.height + 1
        producer_id = producer_for(self.authorities, height)
        sealed_at = self.genesis.sealed_at + height * self.block_interval
        block = self.nodes[producer_id].produce(sealed_at)
        for nid in sorted(self.nodes):
            if nid != producer_id:
                self.nodes[nid].apply_block(block)
        for tx in block.txs:
            self.inclusion[tx.tx_id] = (block.height, block.sealed_at)
        if self.check_replication:
            self._check_replicas()
        for fn in self._listeners:
            fn(block)
        return block

    def _check_replicas(self):
        images = {n.serialize() for n in self.nodes.values()}
        self.replication_checks += 1
        if len(images) != 1:
            self.replication_mismatches += 1

    def query_state(self, contract: str, key: str, node: Optional[int] = None):
        target = self.reference if node is None else self.nodes[node]
        return target.query(contract, key)

    def tx_status(self, tx_id: bytes) -> Optional[str]:
        return self.reference.tx_status.get(tx_id.hex())

    def dump_chain(self) -> str:
        return "".join(json.dumps(b.to_dict(), separators=(",", ":")) + "\n" for b in self.blocks)


def replay(blocks: List[Block], executor) -> Tuple[dict, dict]:
    """Rebuild contract state from genesis; raises IntegrityError on any break."""
    node = LedgerNode(-1, blocks[0], executor)
    for block in blocks[1:]:
        node.apply_block(block)
    return node.store, node.tx_status


def load_chain(text: str) -> List[Block]:
    return [Block.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
