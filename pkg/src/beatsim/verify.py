"""Offline auditor: re-checks a run's invariants from its artifact files alone."""

import csv
import json
from collections import Counter
from pathlib import Path
from typing import Dict, List, Tuple

from .contracts import ContractEngine, ContractKind
from .digest import canonical_json, sha3
from .ledger import IntegrityError, load_chain, replay
from .recording import proofs_from_jsonl


class CorruptArtifact(Exception):
    pass


def _load_json(path: Path):
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptArtifact(f"{path.name}: {exc}") from None


def _lines(path: Path) -> List[dict]:
    try:
        return [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptArtifact(f"{path.name}: {exc}") from None


class Auditor:
    def __init__(self, directory):
        self.dir = Path(directory)
        if not (self.dir / "summary.json").exists():
            raise CorruptArtifact(f"{self.dir} holds no summary.json")
        self.summary = _load_json(self.dir / "summary.json")
        self.topology = _load_json(self.dir / "topology.json")
        self._chain = None
        self._state = None

    def chain(self):
        if self._chain is None:
            try:
                self._chain = load_chain((self.dir / "chain.jsonl").read_text())
            except (OSError, ValueError, KeyError, IntegrityError) as exc:
                raise CorruptArtifact(f"chain.jsonl: {exc}") from None
        return self._chain

    def state(self) -> dict:
        if self._state is None:
            self._state, _ = replay(self.chain(), ContractEngine(self.topology["governance"]))
        return self._state

    # each check returns (ok, detail)

    def check_chain_integrity(self) -> Tuple[bool, str]:
        try:
            blocks = self.chain()
            self.state()
        except (CorruptArtifact, IntegrityError) as exc:
            return False, str(exc)
        for i, b in enumerate(blocks):
            if b.height != i:
                return False, f"height gap at line {i + 1}"
        head = blocks[-1]
        if head.digest.hex() != self.summary["ledger"]["head"]:
            return False, "chain head differs from summary"
        return True, f"{len(blocks)} blocks replayed"

    def check_replication(self) -> Tuple[bool, str]:
        nodes = _load_json(self.dir / "nodes.json")
        images = {(n["head"], n["state_root"], n["image_sha3"]) for n in nodes.values()}
        if len(images) != 1:
            return False, f"{len(images)} distinct replica states"
        if self.summary["ledger"]["replication_mismatches"]:
            return False, "replication mismatches recorded during the run"
        try:
            head = self.chain()[-1]
        except CorruptArtifact as exc:
            return False, str(exc)
        (h, root, _), = images
        if h != head.digest.hex() or root != head.state_root.hex():
            return False, "replicas disagree with the chain dump"
        return True, f"{len(nodes)} replicas identical"

    def check_conservation(self) -> Tuple[bool, str]:
        try:
            with open(self.dir / "flows.csv", newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            return False, str(exc)
        injected = delivered = dropped = 0
        for r in rows:
            p, d, x = int(r["packets"]), int(r["delivered"]), int(r["dropped"])
            if p != d + x:
                return False, f"flow {r['flow_id']}: {p} != {d} + {x}"
            injected, delivered, dropped = injected + p, delivered + d, dropped + x
        pk = self.summary["packets"]
        if (injected, delivered, dropped) != (pk["injected"], pk["delivered"], pk["dropped"]):
            return False, "packet totals differ from summary"
        try:
            state = self.state()
        except (CorruptArtifact, IntegrityError) as exc:
            return False, str(exc)
        on_chain = sum(c["state"]["count"] for c in state.values()
                       if c["kind"] == ContractKind.QM.value)
        expected = 2 * sum(1 for r in rows if int(r["delivered"]) > 0)
        if on_chain != expected:
            return False, f"{on_chain} receipts on chain, expected {expected}"
        return True, f"{len(rows)} flows, {on_chain} receipts"

    def check_proof_presence(self) -> Tuple[bool, str]:
        threshold = self.topology["threshold_time_ms"]
        end = self.summary["end_time_ms"]
        held: Counter = Counter()
        for f in sorted((self.dir / "proofs").glob("*.jsonl")):
            try:
                for p in proofs_from_jsonl(f.read_text()):
                    held[(p.node, p.src_id, p.dst_id, p.tr)] += 1
            except (ValueError, KeyError) as exc:
                raise CorruptArtifact(f"{f.name}: {exc}") from None
        for row in _lines(self.dir / "forged.jsonl"):
            held[(row["node"], row["src_id"], row["dst_id"], row["tr"])] -= 1
        need: Counter = Counter()
        for h in _lines(self.dir / "hops.jsonl"):
            if end - h["tr"] <= threshold:
                need[(h["node"], h["prev_hop"], h["next_hop"], h["tr"])] += 1
        missing = sum(max(0, n - held[k]) for k, n in need.items())
        if missing:
            return False, f"{missing} forwarding proofs missing"
        return True, f"{sum(need.values())} proofs present"

    def check_verdicts(self) -> Tuple[bool, str]:
        try:
            state = self.state()
        except (CorruptArtifact, IntegrityError) as exc:
            return False, str(exc)
        recorded = {}
        for c in state.values():
            if c["kind"] == ContractKind.RO.value:
                for k, v in c["state"].items():
                    if k.startswith("verdict/"):
                        recorded[v["dispute_id"]] = v
        files = sorted((self.dir / "verdicts").glob("*.json"))
        if len(files) != len(recorded):
            return False, f"{len(files)} verdict files, {len(recorded)} on chain"
        honest = self.summary["config"]["adversary"]["strategy"] == "HonestForwarding"
        for f in files:
            v = _load_json(f)
            onchain = recorded.get(v["dispute_id"])
            if onchain is None or onchain["report_digest"] != sha3(canonical_json(v)).hex():
                return False, f"{f.name} does not match its on-chain digest"
            if honest and v["outcome"] != "HonestAllocation":
                return False, f"{f.name}: honest run accused {v['culprits']}"
        return True, f"{len(files)} verdicts consistent"

    CHECKS: Dict[str, str] = {
        "chain-integrity": "check_chain_integrity",
        "replication": "check_replication",
        "conservation": "check_conservation",
        "proof-presence": "check_proof_presence",
        "verdict-soundness": "check_verdicts",
    }

    def run(self) -> Dict[str, Tuple[bool, str]]:
        results = {}
        for name, meth in self.CHECKS.items():
            try:
                results[name] = getattr(self, meth)()
            except CorruptArtifact as exc:
                results[name] = (False, str(exc))
        return results


def verify(directory) -> Dict[str, Tuple[bool, str]]:
    return Auditor(directory).run()
