"""Per-device packet processor.

Each device keeps three records of the traffic it forwards:

* flow receipts, hashed and written on-ledger, only at the two ends of a flow;
* forwarding proofs ``(node, upstream, downstream, tr)`` in a volatile buffer
  that only guarantees retention for ``threshold_time_ms``;
* a non-volatile per-neighbour-pair packet counter reported to governance.
"""

import hashlib
import json
import struct
from collections import Counter, deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, Iterable, List, Optional, Tuple

EDGE = 0
RECEIPT_ENCODING = struct.Struct(">QIIQ")  # node id, src ip, dst ip, ts
DEFAULT_THRESHOLD_MS = 300_000


def encode_receipt(node: int, src_ip: int, dst_ip: int, ts: int) -> bytes:
    return RECEIPT_ENCODING.pack(node, src_ip, dst_ip, ts)


@dataclass(frozen=True)
class Receipt:
    node: int
    src_ip: int
    dst_ip: int
    ts: int
    digest: bytes

    def preimage(self) -> bytes:
        return encode_receipt(self.node, self.src_ip, self.dst_ip, self.ts)

    def to_dict(self) -> dict:
        return {"node": self.node, "src_ip": self.src_ip, "dst_ip": self.dst_ip,
                "ts": self.ts, "digest": self.digest.hex()}


def compute_receipt(node: int, src_ip: int, dst_ip: int, ts: int) -> Receipt:
    digest = hashlib.sha3_256(encode_receipt(node, src_ip, dst_ip, ts)).digest()
    return Receipt(node, src_ip, dst_ip, ts, digest)


@dataclass(frozen=True, order=True)
class ForwardingProof:
    tr: int
    src_id: int
    dst_id: int
    node: int

    def to_dict(self) -> dict:
        return {"node": self.node, "src_id": self.src_id, "dst_id": self.dst_id, "tr": self.tr}


class ProofBuffer:
    """Short-term proof store.

    Appends reclaim expired slots from the oldest end; an entry whose age is
    within ``threshold_time`` is never removed.
    """

    def __init__(self, threshold_time: int = DEFAULT_THRESHOLD_MS):
        if threshold_time < 0:
            raise ValueError("threshold_time must be >= 0")
        self.threshold_time = threshold_time
        self.entries: Deque[ForwardingProof] = deque()

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def append(self, proof: ForwardingProof, now: int):
        horizon = now - self.threshold_time
        while self.entries and self.entries[0].tr < horizon:
            self.entries.popleft()
        self.entries.append(proof)

    def evict_expired(self, now: int) -> int:
        kept = [p for p in self.entries if now - p.tr <= self.threshold_time]
        evicted = len(self.entries) - len(kept)
        self.entries = deque(kept)
        return evicted

    def snapshot(self) -> Tuple[ForwardingProof, ...]:
        return tuple(sorted(self.entries))

    def clear(self):
        self.entries.clear()


def evict_expired(buffer: ProofBuffer, now: int) -> int:
    return buffer.evict_expired(now)


class TrafficReport:
    """Packet counters keyed by ``(upstream, downstream)`` neighbour pair."""

    def __init__(self, counts: Optional[Dict[Tuple[int, int], int]] = None):
        self.counts: Counter = Counter(counts or {})

    def increment(self, src_id: int, dst_id: int, by: int = 1):
        self.counts[(src_id, dst_id)] += by

    def total(self) -> int:
        return sum(self.counts.values())

    def snapshot(self) -> Dict[Tuple[int, int], int]:
        return dict(sorted(self.counts.items()))

    def to_json(self) -> dict:
        return {f"{s}-{d}": n for (s, d), n in sorted(self.counts.items())}


@dataclass
class PacketEvent:
    flow_id: str
    packet_index: int
    at_node: int
    prev_hop: int
    next_hop: int
    arrived_at: int


class PacketProcessor:
    """Recording hooks attached to one device.

    ``submit_receipt(flow, receipt)`` is called once per flow at each endpoint;
    wiring it to the QM contract is the caller's job.
    """

    def __init__(self, node: int, threshold_time: int = DEFAULT_THRESHOLD_MS,
                 proof_write_ms: int = 1, tamper_protected: bool = False,
                 submit_receipt: Optional[Callable] = None):
        self.node = node
        self.buffer = ProofBuffer(threshold_time)
        self.report = TrafficReport()
        self.proof_write_ms = proof_write_ms
        self.tamper_protected = tamper_protected
        self.submit_receipt = submit_receipt
        self.receipts: List[Receipt] = []
        self._receipted: set = set()

    def on_packet(self, pkt: PacketEvent, flow, now: int) -> ForwardingProof:
        proof = ForwardingProof(tr=now + self.proof_write_ms, src_id=pkt.prev_hop,
                                dst_id=pkt.next_hop, node=self.node)
        self.buffer.append(proof, now)
        self.report.increment(pkt.prev_hop, pkt.next_hop)
        is_endpoint = self.node in (flow.src, flow.dst)
        if is_endpoint and flow.flow_id not in self._receipted:
            self._receipted.add(flow.flow_id)
            receipt = compute_receipt(self.node, flow.src_ip, flow.dst_ip, pkt.arrived_at)
            self.receipts.append(receipt)
            if self.submit_receipt is not None:
                self.submit_receipt(flow, receipt)
        return proof

    def install_forged(self, proof: ForwardingProof, now: int) -> bool:
        """Adversarial write; refused when the device sits in a TEE."""
        if self.tamper_protected:
            return False
        self.buffer.append(proof, now)
        return True

    def emit_report(self) -> Dict[Tuple[int, int], int]:
        return self.report.snapshot()

    def restart(self):
        # only the proof buffer is volatile
        self.buffer.clear()


def proofs_to_jsonl(proofs: Iterable[ForwardingProof]) -> str:
    rows = sorted(proofs, key=lambda p: (p.tr, p.src_id, p.dst_id, p.node))
    return "".join(json.dumps(p.to_dict(), separators=(",", ":")) + "\n" for p in rows)


def proofs_from_jsonl(text: str) -> List[ForwardingProof]:
    out = []
    for line in text.splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(ForwardingProof(tr=d["tr"], src_id=d["src_id"], dst_id=d["dst_id"],
                                       node=d["node"]))
    return out
