import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from beatsim.contracts import ContractEngine
from beatsim.ledger import (GOVERNANCE_NODE, Blacklisted, IntegrityError, Ledger, NotMember,
                            TxKind, load_chain, producer_for, replay)
from beatsim.sim import Simulator

from oracles import inclusion_latency

GOV = "gov"


def make_ledger(n=3, interval=15_000, **kw):
    sim = Simulator(seed=1)
    ledger = Ledger(sim, ContractEngine(GOV), interval, **kw)
    for node in range(1, n + 1):
        ledger.add_member(node)
    ledger.add_member(GOVERNANCE_NODE, authority=False)
    ledger.start()
    return sim, ledger


def deploy_call():
    return {"kind": "RO", "deployer": GOV, "params": {}}


def test_round_robin_producers():
    # three authorities A, B, C seal heights 1..6 as A B C A B C
    assert [producer_for([10, 20, 30], h) for h in range(1, 7)] == [10, 20, 30, 10, 20, 30]
    sim, ledger = make_ledger()
    sim.run_until(6 * 15_000)
    assert [b.producer for b in ledger.blocks[1:]] == [1, 2, 3, 1, 2, 3]
    assert [b.sealed_at for b in ledger.blocks[1:]] == [15_000 * h for h in range(1, 7)]


def test_tx_at_seal_instant_waits_for_next_block():
    sim, ledger = make_ledger()
    sim.run_until(15_000)  # block 1 already sealed at this instant
    tx = ledger.submit(GOVERNANCE_NODE, TxKind.DEPLOY, deploy_call())
    sim.run_until(30_000)
    assert ledger.inclusion[tx.tx_id] == (2, 30_000)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 200_000), min_size=1, max_size=40),
       st.sampled_from([1000, 15_000, 997]))
def test_inclusion_latency_matches_oracle(times, interval):
    sim, ledger = make_ledger(interval=interval)
    txs = []
    for i, t in enumerate(sorted(times)):
        sim.run_until(t)
        txs.append(ledger.submit(GOVERNANCE_NODE, TxKind.CALL,
                                 {"contract": "none", "method": "x", "args": {"i": i}}))
    sim.run_until(max(times) + interval)
    for tx in txs:
        _, sealed = ledger.inclusion[tx.tx_id]
        lat = sealed - tx.submitted_at
        assert 0 < lat <= interval
        assert lat == inclusion_latency(tx.submitted_at, interval)


def test_in_block_order_is_submission_time_then_id():
    sim, ledger = make_ledger()
    subs = []
    for t, i in [(2, 0), (5, 1), (5, 2), (5, 3)]:
        sim.run_until(t)
        subs.append(ledger.submit(GOVERNANCE_NODE, TxKind.CALL,
                                  {"contract": "c", "method": "m", "args": {"i": i}}))
    sim.run_until(15_000)
    block = ledger.blocks[1]
    assert [tx.sort_key() for tx in block.txs] == sorted(tx.sort_key() for tx in block.txs)
    assert {tx.tx_id for tx in block.txs} == {tx.tx_id for tx in subs}


def test_reverted_call_does_not_abort_block():
    sim, ledger = make_ledger()
    bad = ledger.submit(GOVERNANCE_NODE, TxKind.CALL, {"contract": "nope", "method": "x"})
    good = ledger.submit(GOVERNANCE_NODE, TxKind.DEPLOY, deploy_call())
    sim.run_until(15_000)
    assert ledger.tx_status(bad.tx_id) == "reverted:BadCall"
    assert ledger.tx_status(good.tx_id) == "ok"
    assert len(ledger.reference.store) == 1


def test_non_governance_deploy_reverts():
    sim, ledger = make_ledger()
    tx = ledger.submit(1, TxKind.DEPLOY, {"kind": "RO", "deployer": "mallory", "params": {}})
    sim.run_until(15_000)
    assert ledger.tx_status(tx.tx_id) == "reverted:NotGovernance"


def test_submission_guards():
    sim, ledger = make_ledger()
    with pytest.raises(NotMember):
        ledger.submit(99, TxKind.DEPLOY, deploy_call())
    ledger.blacklist(2)
    with pytest.raises(Blacklisted):
        ledger.submit(2, TxKind.DEPLOY, deploy_call())
    # blacklisted authority drops out of the rotation
    sim.run_until(30_000)
    assert [b.producer for b in ledger.blocks[1:]] == [1, 3]


def test_replicas_identical_and_replay_reproduces_store():
    sim, ledger = make_ledger(check_replication=True)
    for k in range(5):
        sim.run_until(k * 4000 + 1)
        ledger.submit(GOVERNANCE_NODE, TxKind.DEPLOY, deploy_call() | {"params": {"k": k}})
    sim.run_until(60_000)
    assert ledger.replication_checks == 4 and ledger.replication_mismatches == 0
    assert len({n.serialize() for n in ledger.nodes.values()}) == 1
    store, status = replay(load_chain(ledger.dump_chain()), ContractEngine(GOV))
    assert store == ledger.reference.store
    assert status == ledger.reference.tx_status


def test_tampered_chain_fails_replay():
    sim, ledger = make_ledger()
    ledger.submit(GOVERNANCE_NODE, TxKind.DEPLOY, deploy_call())
    sim.run_until(30_000)
    blocks = load_chain(ledger.dump_chain())
    blocks[1] = dataclasses.replace(blocks[1], state_root=b"\x00" * 32)
    with pytest.raises(IntegrityError):
        replay(blocks, ContractEngine(GOV))
    blocks = load_chain(ledger.dump_chain())
    blocks[2] = dataclasses.replace(blocks[2], parent=b"\x11" * 32)
    with pytest.raises(IntegrityError):
        replay(blocks, ContractEngine(GOV))


def test_edited_tx_payload_detected_on_load():
    sim, ledger = make_ledger()
    ledger.submit(GOVERNANCE_NODE, TxKind.DEPLOY, deploy_call())
    sim.run_until(15_000)
    text = ledger.dump_chain().replace('"deployer":"gov"', '"deployer":"eve"')
    with pytest.raises(IntegrityError):
        load_chain(text)


def test_late_member_syncs_existing_chain():
    sim, ledger = make_ledger()
    ledger.submit(GOVERNANCE_NODE, TxKind.DEPLOY, deploy_call())
    sim.run_until(30_000)
    node = ledger.add_member(7, authority=False)
    assert node.serialize() == ledger.reference.serialize()


def test_next_seal_time_is_strictly_after():
    _, ledger = make_ledger(interval=10)
    assert [ledger.next_seal_time(t) for t in (0, 9, 10, 11)] == [10, 10, 20, 20]
