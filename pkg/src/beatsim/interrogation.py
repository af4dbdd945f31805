"""Dispute handling: collect proof buffers, match them against the agreed
route, cross-check neighbours, and estimate per-device QoS."""

import json
import statistics
from bisect import bisect_left, bisect_right
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .digest import canonical_json, sha3
from .recording import EDGE, ForwardingProof, Receipt


class InterrogationError(Exception):
    pass


class UnknownSla(InterrogationError):
    pass


class NotParty(InterrogationError):
    pass


class WindowTooOld(InterrogationError):
    pass


class InsufficientEvidence(InterrogationError):
    pass


class Outcome(str, Enum):
    HONEST = "HonestAllocation"
    PATH_VIOLATION = "PathViolation"
    REPLICATED = "ReplicatedProofs"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class Dispute:
    dispute_id: str
    sla_id: str
    raised_by: str
    raised_at: int
    window: Tuple[int, int]


@dataclass
class Verdict:
    dispute_id: str
    sla_id: str
    outcome: Outcome
    culprits: Dict[str, List[int]] = field(default_factory=dict)
    reason: Optional[str] = None
    evidence: Dict[str, object] = field(default_factory=dict)
    qos: Optional[Dict[int, dict]] = None

    @property
    def violation(self) -> bool:
        return self.outcome in (Outcome.PATH_VIOLATION, Outcome.REPLICATED)

    @property
    def all_culprits(self) -> List[int]:
        return sorted({n for nodes in self.culprits.values() for n in nodes})

    def to_dict(self) -> dict:
        return {
            "dispute_id": self.dispute_id,
            "sla_id": self.sla_id,
            "outcome": self.outcome.value,
            "reason": self.reason,
            "culprits": self.all_culprits,
            "culprits_by_kind": {k: sorted(v) for k, v in sorted(self.culprits.items())},
            "evidence": self.evidence,
            "qos": None if self.qos is None else {str(k): v for k, v in sorted(self.qos.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"


# -- proof matching -----------------------------------------------------------

def match_handoffs(up: Sequence[ForwardingProof], down: Sequence[ForwardingProof], tolerance: int):
    """Pair upstream proofs (u -> v) with downstream proofs (v <- u) one-to-one.

    A pair is valid when ``0 <= down.tr - up.tr <= tolerance``. Links are FIFO,
    so greedy earliest matching over time-sorted lists is maximal.
    Returns ``(pairs, unmatched_up, unmatched_down)``.
    """
    up = sorted(up)
    down = sorted(down)
    pairs, lost_up, lost_down = [], [], []
    i = 0
    for d in down:
        while i < len(up) and up[i].tr < d.tr - tolerance:
            lost_up.append(up[i])
            i += 1
        if i < len(up) and up[i].tr <= d.tr:
            pairs.append((up[i], d))
            i += 1
        else:
            lost_down.append(d)
    lost_up.extend(up[i:])
    return pairs, lost_up, lost_down


@dataclass
class Flag:
    claim: ForwardingProof
    witness: int  # the upstream device that never sent
    independent: bool


@dataclass
class CrossReport:
    flags: List[Flag] = field(default_factory=list)
    pairs: Dict[Tuple[int, int], list] = field(default_factory=dict)
    claims_checked: int = 0
    unconfirmed_sends: int = 0

    @property
    def flagged(self) -> Set[int]:
        return {f.claim.node for f in self.flags}

    @property
    def attributed(self) -> Set[int]:
        return {f.claim.node for f in self.flags if f.independent}

    @property
    def unattributed(self) -> Set[int]:
        return self.flagged - self.attributed


def independent_witness(network, claimant: int, witness: int) -> bool:
    """Whether ``witness`` can contradict ``claimant`` without colluding."""
    w = network.devices[witness]
    c = network.devices[claimant]
    if c.tamper_protected:
        return False
    return w.tamper_protected or w.owner != c.owner


def cross_verify(proofs: Dict[int, Sequence[ForwardingProof]], network, window: Tuple[int, int],
                 tolerance: int, horizon: Optional[int] = None) -> CrossReport:
    """Check every in-window forwarding claim against the named neighbours.

    A device claiming ``(N, src, dst, tr)`` must be backed by a proof at ``src``
    naming ``N`` as downstream, no earlier than ``tr - tolerance``. Only this
    direction is evidence: a send that ``dst`` never logged is what a lossy
    link produces, so those are just counted. Claims whose counterpart device
    was not collected, or whose counterpart may already have been evicted
    (older than ``horizon``), are not judged.
    """
    lo, hi = window
    report = CrossReport()
    outgoing = defaultdict(list)
    incoming = defaultdict(list)
    for node, plist in proofs.items():
        for p in plist:
            if p.dst_id != EDGE:
                outgoing[(node, p.dst_id)].append(p)
            if p.src_id != EDGE:
                incoming[(p.src_id, node)].append(p)
    edges = set(outgoing) | set(incoming)

    def in_window(p):
        return lo <= p.tr <= hi

    for u, v in sorted(edges):
        if u not in proofs or v not in proofs:
            continue
        up, down = outgoing.get((u, v), []), incoming.get((u, v), [])
        pairs, lost_up, lost_down = match_handoffs(up, down, tolerance)
        report.pairs[(u, v)] = pairs
        report.claims_checked += sum(1 for p in down if in_window(p))
        adjacent = v in network.devices[u].neighbors
        report.unconfirmed_sends += sum(1 for p in lost_up if in_window(p))
        for p in lost_down:
            if not in_window(p):
                continue
            if horizon is not None and p.tr - tolerance < horizon:
                continue
            report.flags.append(Flag(p, u, not adjacent or independent_witness(network, v, u)))
    return report


# -- route matching -------------------------------------------------------------

class _Lane:
    """Time-sorted proofs of one device with consumption marks."""

    def __init__(self, proofs: Iterable[ForwardingProof]):
        self.proofs = sorted(proofs)
        self.trs = [p.tr for p in self.proofs]
        self.used: Set[int] = set()

    def take(self, lo: int, hi: int, pred) -> Optional[ForwardingProof]:
        for idx in range(bisect_left(self.trs, lo), bisect_right(self.trs, hi)):
            if idx not in self.used and pred(self.proofs[idx]):
                self.used.add(idx)
                return self.proofs[idx]
        return None


def bypass_witness(network, bypassed: int, witness: int) -> bool:
    """Whether ``witness``'s own proof can show ``bypassed`` was routed around."""
    w = network.devices[witness]
    return w.tamper_protected or w.owner != network.devices[bypassed].owner


@dataclass
class RouteTrace:
    flows: int = 0
    bypassed: Counter = field(default_factory=Counter)
    forged: Counter = field(default_factory=Counter)
    unattributed: Counter = field(default_factory=Counter)
    missing_ingress: int = 0


def trace_route(path: Sequence[int], ingress_times: Iterable[int],
                proofs: Dict[int, Sequence[ForwardingProof]], tolerance: int,
                max_detour: int, network) -> RouteTrace:
    """Follow each receipted flow's first packet along the agreed route.

    A hop counts only when the sender's proof names the receiver and the
    receiver's proof names the sender. When the sender names a device off the
    route, the packet was diverted: the trace jumps to the route device where
    it came back, and every route device in between was bypassed. A bypassed
    device that still holds a proof for that packet carries a forged claim.
    Each accusation needs the diverting or the rejoining device to be an
    independent witness. A packet that vanishes on an agreed link is loss and
    accuses nobody.
    """
    lanes = {n: _Lane(proofs.get(n, ())) for n in path}
    out = RouteTrace()
    last = len(path) - 1
    for ts in sorted(ingress_times):
        out.flows += 1
        prev = lanes[path[0]].take(ts, ts + tolerance, lambda p: p.src_id == EDGE)
        if prev is None:
            out.missing_ingress += 1
            continue
        k = 1
        while k <= last:
            node = path[k]
            if prev.dst_id == node:
                p = lanes[node].take(prev.tr, prev.tr + tolerance,
                                     lambda p, src=path[k - 1]: p.src_id == src)
                if p is None:
                    break  # lost in transit
                prev = p
                k += 1
                continue
            rejoin, j = None, k + 1
            while j <= last:
                rejoin = lanes[path[j]].take(prev.tr, prev.tr + max_detour,
                                             lambda p, src=path[j - 1]: p.src_id != src)
                if rejoin is not None:
                    break
                j += 1
            skipped = path[k:j] if rejoin is not None else path[k:k + 1]
            witnesses = [path[k - 1]] + ([path[j]] if rejoin is not None else [])
            until = (rejoin.tr if rejoin is not None else prev.tr + max_detour) + tolerance
            for i, s in enumerate(skipped, start=k):
                if any(bypass_witness(network, s, w) for w in witnesses):
                    out.bypassed[s] += 1
                    nxt = path[i + 1] if i < last else EDGE
                    claim = lanes[s].take(prev.tr, until, lambda p, a=path[i - 1], b=nxt:
                                          p.src_id == a and p.dst_id == b)
                    if claim is not None:
                        out.forged[s] += 1
                else:
                    out.unattributed[s] += 1
            if rejoin is None:
                break
            prev = rejoin
            k = j + 1
    return out


# -- QoS -------------------------------------------------------------------------

def estimate_qos(proofs: Dict[int, Sequence[ForwardingProof]], path: Sequence[int],
                 window: Tuple[int, int], tolerance: int) -> Dict[int, dict]:
    """Per-device forwarding delay and loss from proof timestamps.

    Delay of device N is the successor's ``tr`` minus N's ``tr`` for each
    corroborated hand-off; loss is packets proven in minus packets proven out.
    """
    lo, hi = window
    table = {}
    total = 0
    span_s = max(hi - lo, 1) / 1000.0
    for k, node in enumerate(path):
        prev = path[k - 1] if k > 0 else EDGE
        succ = path[k + 1] if k + 1 < len(path) else EDGE
        mine = [p for p in proofs.get(node, ()) if p.src_id == prev and lo <= p.tr <= hi]
        total += len(mine)
        if succ == EDGE:
            out = len(mine)
            delays = []
        else:
            handed = [p for p in mine if p.dst_id == succ]
            down = [p for p in proofs.get(succ, ()) if p.src_id == node]
            pairs, _, _ = match_handoffs(handed, down, tolerance)
            out = len(pairs)
            delays = [d.tr - u.tr for u, d in pairs]
        table[node] = {
            "packets_in": len(mine),
            "packets_out": out,
            "loss": len(mine) - out,
            "delay_mean": statistics.fmean(delays) if delays else None,
            "delay_max": max(delays) if delays else None,
            "throughput_pps": len(mine) / span_s,
        }
    if total == 0:
        raise InsufficientEvidence("no proofs inside the dispute window")
    return table


# -- protocol driver ------------------------------------------------------------------

class Interrogator:
    def __init__(self, network, processors, contracts, governance: str,
                 threshold_time: int, slack_ms: int = 50, record_on_ledger: bool = True):
        self.network = network
        self.processors = processors
        self.contracts = contracts
        self.governance = governance
        self.threshold_time = threshold_time
        self.slack_ms = slack_ms
        self.record_on_ledger = record_on_ledger
        self.verdicts: List[Verdict] = []
        self.verdict_txs: Dict[str, bytes] = {}

    @property
    def tolerance(self) -> int:
        delays = [l.delay for l in self.network.links.values()]
        return (max(delays) if delays else 0) + self.slack_ms

    def collect(self, path: Sequence[int], now: int) -> Dict[int, Tuple[ForwardingProof, ...]]:
        devices = set(path)
        for n in path:
            devices |= self.network.neighbors(n)
        out = {}
        for n in sorted(devices):
            proc = self.processors[n]
            proc.buffer.evict_expired(now)
            out[n] = proc.buffer.snapshot()
        return out

    def verified_receipts(self, sla, node: int) -> List[Receipt]:
        qm = self.contracts.qm_by_sla.get(sla.sla_id)
        if qm is None or not self.contracts.is_callable(qm):
            return []
        on_chain = {(e.digest, e.recorder) for e in self.contracts.qm_entries(qm)}
        out = []
        for r in self.processors[node].receipts:
            if sha3(r.preimage()) == r.digest and (r.digest, node) in on_chain:
                out.append(r)
        return out

    def initiate(self, dispute: Dispute, now: Optional[int] = None) -> Verdict:
        now = dispute.raised_at if now is None else now
        sla = self.contracts.get_sla(dispute.sla_id)
        if sla is None:
            raise UnknownSla(dispute.sla_id)
        if dispute.raised_by not in (sla.tenant, self.governance):
            raise NotParty(dispute.raised_by)
        lo, hi = dispute.window
        if lo > hi:
            raise ValueError("empty dispute window")
        if now - hi > self.threshold_time:
            raise WindowTooOld(f"window ended {now - hi} ms ago")

        path = sla.path
        tol = self.tolerance
        proofs = self.collect(path, now)
        receipts = [r for r in self.verified_receipts(sla, path[0]) if lo <= r.ts <= hi]
        evidence = {
            "devices_collected": len(proofs),
            "proofs_collected": sum(len(v) for v in proofs.values()),
            "receipts_verified": len(receipts),
        }
        verdict = Verdict(dispute.dispute_id, sla.sla_id, Outcome.INCONCLUSIVE, evidence=evidence)

        if now - lo > self.threshold_time:
            verdict.reason = "PartialEviction"
        elif not receipts:
            verdict.reason = "NoTrafficInWindow"
        else:
            horizon = now - self.threshold_time
            trace = trace_route(path, [r.ts for r in receipts], proofs, tol,
                                tol * len(self.network.devices), self.network)
            cross = cross_verify(proofs, self.network, (lo, hi), tol, horizon)
            if trace.missing_ingress:
                # the ingress receipted a flow it holds no proof for
                trace.unattributed[path[0]] += trace.missing_ingress
            bypassed = set(trace.bypassed)
            forged = set(trace.forged) | cross.attributed
            unattributed = (set(trace.unattributed) | cross.unattributed) - bypassed - forged
            evidence.update({
                "flows_traced": trace.flows,
                "bypassed_flow_hops": {str(n): c for n, c in sorted(trace.bypassed.items())},
                "forged_flow_hops": {str(n): c for n, c in sorted(trace.forged.items())},
                "claims_checked": cross.claims_checked,
                "claims_flagged": len(cross.flags),
                "unconfirmed_sends": cross.unconfirmed_sends,
                "unattributed": sorted(unattributed),
            })
            if bypassed:
                verdict.culprits[Outcome.PATH_VIOLATION.value] = sorted(bypassed)
            if forged:
                verdict.culprits[Outcome.REPLICATED.value] = sorted(forged)
            if forged:
                verdict.outcome = Outcome.REPLICATED
            elif bypassed:
                verdict.outcome = Outcome.PATH_VIOLATION
            elif unattributed:
                verdict.reason = "NoIndependentWitness"
            else:
                verdict.outcome = Outcome.HONEST
            try:
                verdict.qos = estimate_qos(proofs, path, (lo, hi), tol)
            except InsufficientEvidence:
                verdict.qos = None

        self.verdicts.append(verdict)
        if self.record_on_ledger:
            summary = {
                "dispute_id": dispute.dispute_id,
                "sla_id": sla.sla_id,
                "raised_by": dispute.raised_by,
                "outcome": verdict.outcome.value,
                "culprits": verdict.all_culprits,
                "violation": verdict.violation,
                "report_digest": sha3(canonical_json(verdict.to_dict())).hex(),
            }
            self.verdict_txs[dispute.dispute_id] = self.contracts.record_verdict(summary)
        return verdict
