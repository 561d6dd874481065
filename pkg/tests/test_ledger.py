import pytest

from dtcb.gateway import Directory
from dtcb.ledger import (
    ALLOWED_TRANSITIONS,
    AssetState,
    Invalidate,
    Ledger,
    Register,
    Rollback,
    TransferOut,
    Unlock,
)
from dtcb.world import SimWorld

A = b"\xaa" * 32
U1, U2 = b"\x01" * 32, b"\x02" * 32


def ledger(**kw):
    led = Ledger("BC1", gateways={"G1"}, **kw)
    led.add_asset(A, U1, 10, "A1")
    return led


def produce(led, *txs, now=5):
    seqs = [led.submit_tx(tx).seq for tx in txs]
    events = led.produce_block(now)
    return seqs, events


def test_transfer_out_locks_for_gateway():
    led = ledger()
    produce(led, TransferOut(A, "BC2", U2, "G1"))
    rec = led.assets[A]
    assert rec.state is AssetState.LOCKED
    assert rec.lock_holder == "G1" and rec.dest_owner == U2 and rec.deadline == 1005


def test_transfer_out_needs_authorized_gateway():
    led = ledger()
    (seq,), events = produce(led, TransferOut(A, "BC2", U2, "mallory"))
    assert led.succeeded(seq) is False
    assert events[0].kind == "tx_failed" and "not authorized" in events[0].summary
    assert led.assets[A].state is AssetState.ACTIVE


def test_unknown_asset_rejected_at_submission():
    receipt = ledger().submit_tx(Unlock(b"\x00" * 32, "G1"))
    assert not receipt.accepted and receipt.reason == "unknown asset"


def test_invalidate_redirects():
    led = ledger()
    produce(led, TransferOut(A, "BC2", U2, "G1"))
    t1, t2 = b"\x11" * 32, b"\x22" * 32
    produce(led, Invalidate(A, t1, t2, "BC2", "G1"), now=10)
    rec = led.assets[A]
    assert rec.state is AssetState.INVALIDATED
    q = led.query_asset(t1)
    assert (q.status, q.chain, q.remote_public_id) == ("Redirect", "BC2", t2)


def test_invalidate_requires_lock_holder_and_is_final():
    led = ledger()
    produce(led, TransferOut(A, "BC2", U2, "G1"))
    (seq,), _ = produce(led, Invalidate(A, b"1" * 32, b"2" * 32, "BC2", "G9"), now=10)
    assert led.succeeded(seq) is False
    produce(led, Invalidate(A, b"1" * 32, b"2" * 32, "BC2", "G1"), now=15)
    for tx in (Unlock(A, "G1"), Invalidate(A, b"1" * 32, b"2" * 32, "BC2", "G1"), TransferOut(A, "BC2", U2, "G1")):
        (seq,), _ = produce(led, tx, now=20)
        assert led.succeeded(seq) is False
    assert led.assets[A].state is AssetState.INVALIDATED


def test_unlock_only_by_holder():
    led = ledger()
    produce(led, TransferOut(A, "BC2", U2, "G1"))
    (bad, good), _ = produce(led, Unlock(A, "G2"), Unlock(A, "G1"), now=10)
    assert led.succeeded(bad) is False and led.succeeded(good) is True
    assert led.assets[A].state is AssetState.ACTIVE


def test_register_then_unlock_and_rollback():
    led = Ledger("BC2", gateways={"G2"})
    pid, masked, origin = b"\x0b" * 32, b"\x0c" * 32, b"\x0d" * 32
    produce(led, Register(pid, masked, U2, "G2", 100, 10, "BC1", origin))
    rec = led.assets[pid]
    assert rec.state is AssetState.LOCKED and rec.registered
    assert led.query_asset(masked).status == "Locked"
    produce(led, Unlock(pid, "G2"), now=10)
    assert led.query_asset(masked).status == "Active"
    assert led.query_asset(masked).owner == U2

    pid2, masked2 = b"\x0e" * 32, b"\x0f" * 32
    produce(led, Register(pid2, masked2, U2, "G2", 100, 10, "BC1", origin), now=15)
    produce(led, Rollback(pid2, "G2"), now=20)
    assert pid2 not in led.assets
    assert led.query_asset(masked2).status == "NotFound"


def test_register_rejects_duplicates_and_past_deadlines():
    led = Ledger("BC2")
    pid, masked = b"\x0b" * 32, b"\x0c" * 32
    (a, b, c), _ = produce(
        led,
        Register(pid, masked, U2, "G2", 100, 1, "BC1", bytes(32)),
        Register(pid, b"\x01" * 32, U2, "G2", 100, 1, "BC1", bytes(32)),
        Register(b"\x02" * 32, masked, U2, "G2", 100, 1, "BC1", bytes(32)),
    )
    assert [led.succeeded(s) for s in (a, b, c)] == [True, False, False]
    (d,), _ = produce(led, Register(b"\x03" * 32, b"\x04" * 32, U2, "G2", 5, 1, "BC1", bytes(32)), now=5)
    assert led.succeeded(d) is False


def test_private_ids_only_visible_inside():
    led = ledger()
    assert led.query_asset(A).status == "NotFound"
    assert led.query_asset(A, requester_chain="BC2").status == "NotFound"
    assert led.query_asset(A, requester_chain="BC1").status == "Active"


def test_lock_expiry_strictly_after_deadline():
    led = ledger(outbound_lock_ticks=10)
    produce(led, TransferOut(A, "BC2", U2, "G1"), now=5)
    led.produce_block(15)
    assert led.assets[A].state is AssetState.LOCKED
    events = led.produce_block(16)
    assert [e.kind for e in events] == ["lock_expired"]
    assert led.assets[A].state is AssetState.ACTIVE


def test_expired_registration_disappears():
    led = Ledger("BC2")
    pid = b"\x0b" * 32
    produce(led, Register(pid, b"\x0c" * 32, U2, "G2", 20, 1, "BC1", bytes(32)))
    led.produce_block(21)
    assert pid not in led.assets


@pytest.mark.parametrize("depth", [0, 1, 3])
def test_confirmation_depth(depth):
    led = ledger(confirmation_depth=depth)
    seq = led.submit_tx(TransferOut(A, "BC2", U2, "G1")).seq
    assert not led.is_included(seq)
    led.produce_block(5)
    assert led.is_included(seq)
    for extra in range(depth):
        assert not led.is_confirmed(seq)
        led.produce_block(10 + extra)
    assert led.is_confirmed(seq)


def test_transitions_all_allowed():
    led = ledger(outbound_lock_ticks=3)
    produce(led, TransferOut(A, "BC2", U2, "G1"), now=5)
    led.produce_block(10)
    produce(led, TransferOut(A, "BC2", U2, "G1"), now=15)
    produce(led, Invalidate(A, b"1" * 32, b"2" * 32, "BC2", "G1"), now=16)
    triples = [(t.before, t.after, t.cause) for t in led.transitions]
    assert triples == [
        ("Active", "Locked", "TransferOut"),
        ("Locked", "Active", "Expire"),
        ("Active", "Locked", "TransferOut"),
        ("Locked", "Invalidated", "Invalidate"),
    ]
    assert set(triples) <= ALLOWED_TRANSITIONS


def test_block_order_follows_submission():
    led = ledger()
    (first, second), _ = produce(led, TransferOut(A, "BC2", U2, "G1"), Unlock(A, "G1"))
    assert led.succeeded(first) and led.succeeded(second)
    (first, second), _ = produce(led, Unlock(A, "G1"), TransferOut(A, "BC2", U2, "G1"), now=10)
    assert led.succeeded(first) is False and led.succeeded(second)


def test_empty_world_produces_one_block_per_interval():
    ledgers = {"BC1": Ledger("BC1", block_interval=5), "BC2": Ledger("BC2", block_interval=7)}
    world = SimWorld(1, ledgers, Directory(), {})
    world.run(tick_limit=50, stop_when_quiescent=False)
    assert len(ledgers["BC1"].blocks) == 10
    assert len(ledgers["BC2"].blocks) == 7
    assert [b.tick for b in ledgers["BC1"].blocks] == list(range(5, 55, 5))
