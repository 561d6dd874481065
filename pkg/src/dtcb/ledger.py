"""Simulated ledger of one blockchain autonomous system.

Consensus is abstracted away: the owning world calls :meth:`Ledger.produce_block`
every ``block_interval`` ticks, which applies the pending queue in submission
order and then expires overdue locks. A transaction is confirmed once its block
is followed by ``confirmation_depth`` later blocks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Union

from .encoding import encode


class AssetState(enum.Enum):
    ACTIVE = "Active"
    LOCKED = "Locked"
    INVALIDATED = "Invalidated"


@dataclass(frozen=True)
class AssetRecord:
    private_tx_id: bytes
    owner: bytes
    state: AssetState = AssetState.ACTIVE
    value: int = 0
    label: str = ""
    lock_holder: str | None = None
    deadline: int | None = None
    # set by Register: public (masked) id here and the origin's public id
    public_id: bytes | None = None
    origin_chain: str | None = None
    origin_public_id: bytes | None = None
    registered: bool = False
    # set by TransferOut
    dest_chain: str | None = None
    dest_owner: bytes | None = None
    # set by Invalidate
    local_public_id: bytes | None = None
    remote_public_id: bytes | None = None
    remote_chain: str | None = None


@dataclass(frozen=True)
class TransferOut:
    asset: bytes
    dest_chain: str
    dest_pubkey: bytes
    gateway: str
    submitter: str = ""

    def encode(self) -> bytes:
        return encode("TransferOut", self.asset, self.dest_chain, self.dest_pubkey, self.gateway)


@dataclass(frozen=True)
class Register:
    private_id: bytes
    masked_id: bytes
    owner: bytes
    lock_holder: str
    deadline: int
    value: int
    origin_chain: str
    origin_public_id: bytes

    @property
    def submitter(self) -> str:
        return self.lock_holder

    def encode(self) -> bytes:
        return encode(
            "Register",
            self.private_id,
            self.masked_id,
            self.owner,
            self.lock_holder,
            self.deadline,
            self.value,
            self.origin_chain,
            self.origin_public_id,
        )


@dataclass(frozen=True)
class Invalidate:
    asset: bytes
    txid1_public: bytes
    txid2_public: bytes
    remote_chain: str
    submitter: str

    def encode(self) -> bytes:
        return encode(
            "Invalidate",
            self.asset,
            self.txid1_public,
            self.txid2_public,
            self.remote_chain,
            self.submitter,
        )


@dataclass(frozen=True)
class Unlock:
    asset: bytes
    submitter: str

    def encode(self) -> bytes:
        return encode("Unlock", self.asset, self.submitter)


@dataclass(frozen=True)
class Rollback:
    asset: bytes
    submitter: str

    def encode(self) -> bytes:
        return encode("Rollback", self.asset, self.submitter)


LedgerTx = Union[TransferOut, Register, Invalidate, Unlock, Rollback]


def tx_kind(tx: LedgerTx) -> str:
    return type(tx).__name__


@dataclass(frozen=True)
class Receipt:
    chain_id: str
    seq: int
    accepted: bool
    reason: str | None = None


@dataclass(frozen=True)
class LedgerEvent:
    kind: str  # tx_applied | tx_failed | lock_expired
    seq: int | None
    tx: LedgerTx | None
    asset: bytes | None
    summary: str

    def payload(self) -> bytes:
        return encode(
            self.kind,
            b"" if self.seq is None else self.seq.to_bytes(8, "big"),
            b"" if self.tx is None else self.tx.encode(),
            self.asset or b"",
            self.summary,
        )


@dataclass(frozen=True)
class Block:
    height: int
    tick: int
    txs: tuple[tuple[int, LedgerTx, bool], ...]

    def to_bytes(self) -> bytes:
        return encode(
            self.height,
            self.tick,
            [encode(seq, tx.encode(), ok) for seq, tx, ok in self.txs],
        )


@dataclass(frozen=True)
class QueryResult:
    status: str  # Active | Locked | Redirect | NotFound
    chain: str | None = None
    remote_public_id: bytes | None = None
    owner: bytes | None = None


NOT_FOUND = QueryResult("NotFound")


@dataclass(frozen=True)
class Transition:
    tick: int
    asset: bytes
    before: str
    after: str
    cause: str


# (before, after, cause) triples that apply_tx and expiry may produce
ALLOWED_TRANSITIONS = {
    ("Active", "Locked", "TransferOut"),
    ("Absent", "Locked", "Register"),
    ("Locked", "Invalidated", "Invalidate"),
    ("Active", "Invalidated", "Invalidate"),
    ("Locked", "Active", "Unlock"),
    ("Locked", "Absent", "Rollback"),
    ("Locked", "Active", "Expire"),
    ("Locked", "Absent", "Expire"),
}


class Ledger:
    def __init__(
        self,
        chain_id: str,
        block_interval: int = 5,
        confirmation_depth: int = 1,
        outbound_lock_ticks: int = 1000,
        gateways: set[str] | None = None,
    ):
        if block_interval < 1:
            raise ValueError("block_interval must be >= 1")
        if confirmation_depth < 0:
            raise ValueError("confirmation_depth must be >= 0")
        self.chain_id = chain_id
        self.block_interval = block_interval
        self.confirmation_depth = confirmation_depth
        self.outbound_lock_ticks = outbound_lock_ticks
        self.gateways = set(gateways or ())
        self.blocks: list[Block] = []
        self.pending: list[tuple[int, LedgerTx]] = []
        self.assets: dict[bytes, AssetRecord] = {}
        self.transitions: list[Transition] = []
        self._next_seq = 0
        self._included: dict[int, int] = {}  # seq -> block height
        self._outcomes: dict[int, bool] = {}

    # -- genesis -----------------------------------------------------------
    def add_asset(self, private_id: bytes, owner: bytes, value: int = 0, label: str = "") -> None:
        if private_id in self.assets:
            raise ValueError("duplicate asset id")
        self.assets[private_id] = AssetRecord(private_id, owner, value=value, label=label)

    # -- submission --------------------------------------------------------
    def submit_tx(self, tx: LedgerTx) -> Receipt:
        seq = self._next_seq
        self._next_seq += 1
        if not isinstance(tx, Register) and tx.asset not in self.assets:
            return Receipt(self.chain_id, seq, False, "unknown asset")
        self.pending.append((seq, tx))
        return Receipt(self.chain_id, seq, True)

    def is_included(self, seq: int) -> bool:
        return seq in self._included

    def succeeded(self, seq: int) -> bool | None:
        return self._outcomes.get(seq)

    def is_confirmed(self, seq: int) -> bool:
        height = self._included.get(seq)
        if height is None:
            return False
        return len(self.blocks) - 1 - height >= self.confirmation_depth

    # -- block production --------------------------------------------------
    def produce_block(self, now: int) -> list[LedgerEvent]:
        events = []
        applied = []
        height = len(self.blocks)
        batch, self.pending = self.pending, []
        for seq, tx in batch:
            reason = self.apply_tx(tx, now)
            self._included[seq] = height
            self._outcomes[seq] = reason is None
            applied.append((seq, tx, reason is None))
            if reason is None:
                events.append(LedgerEvent("tx_applied", seq, tx, _asset_of(tx), tx_kind(tx)))
            else:
                events.append(
                    LedgerEvent("tx_failed", seq, tx, _asset_of(tx), f"{tx_kind(tx)}: {reason}")
                )
        events.extend(self._expire_locks(now))
        self.blocks.append(Block(height, now, tuple(applied)))
        return events

    def _expire_locks(self, now: int) -> list[LedgerEvent]:
        events = []
        for pid, rec in sorted(self.assets.items()):
            if rec.state is not AssetState.LOCKED or rec.deadline is None or rec.deadline >= now:
                continue
            if rec.registered:
                del self.assets[pid]
                self._record(now, pid, "Locked", "Absent", "Expire")
            else:
                self.assets[pid] = replace(
                    rec, state=AssetState.ACTIVE, lock_holder=None, deadline=None
                )
                self._record(now, pid, "Locked", "Active", "Expire")
            events.append(LedgerEvent("lock_expired", None, None, pid, rec.label or "asset"))
        return events

    def apply_tx(self, tx: LedgerTx, now: int) -> str | None:
        """Apply one transaction; return a failure reason, or None on success.

        On failure the ledger state is left untouched.
        """
        if isinstance(tx, Register):
            if tx.private_id in self.assets:
                return "asset id already exists"
            if any(r.public_id == tx.masked_id for r in self.assets.values()):
                return "masked id already registered"
            if tx.deadline <= now:
                return "lock deadline not in the future"
            self.assets[tx.private_id] = AssetRecord(
                tx.private_id,
                tx.owner,
                AssetState.LOCKED,
                value=tx.value,
                lock_holder=tx.lock_holder,
                deadline=tx.deadline,
                public_id=tx.masked_id,
                origin_chain=tx.origin_chain,
                origin_public_id=tx.origin_public_id,
                registered=True,
            )
            self._record(now, tx.private_id, "Absent", "Locked", "Register")
            return None

        rec = self.assets.get(tx.asset)
        if rec is None:
            return "unknown asset"
        if isinstance(tx, TransferOut):
            if rec.state is not AssetState.ACTIVE:
                return "asset not Active"
            if tx.gateway not in self.gateways:
                return "gateway not authorized"
            new = replace(
                rec,
                state=AssetState.LOCKED,
                lock_holder=tx.gateway,
                deadline=now + self.outbound_lock_ticks,
                dest_chain=tx.dest_chain,
                dest_owner=tx.dest_pubkey,
            )
        elif isinstance(tx, Invalidate):
            if rec.state is AssetState.INVALIDATED:
                return "asset already Invalidated"
            if rec.state is AssetState.LOCKED and rec.lock_holder != tx.submitter:
                return "submitter does not hold the lock"
            if rec.state is AssetState.ACTIVE and tx.submitter not in self.gateways:
                return "gateway not authorized"
            new = replace(
                rec,
                state=AssetState.INVALIDATED,
                lock_holder=None,
                deadline=None,
                local_public_id=tx.txid1_public,
                remote_public_id=tx.txid2_public,
                remote_chain=tx.remote_chain,
            )
        elif isinstance(tx, Unlock):
            if rec.state is not AssetState.LOCKED:
                return "asset not Locked"
            if rec.lock_holder != tx.submitter:
                return "submitter does not hold the lock"
            new = replace(rec, state=AssetState.ACTIVE, lock_holder=None, deadline=None)
        elif isinstance(tx, Rollback):
            if rec.state is not AssetState.LOCKED or not rec.registered:
                return "asset not a Locked registration"
            if rec.lock_holder != tx.submitter:
                return "submitter does not hold the lock"
            del self.assets[tx.asset]
            self._record(now, tx.asset, "Locked", "Absent", "Rollback")
            return None
        else:
            return f"unsupported transaction {type(tx).__name__}"
        self.assets[tx.asset] = new
        self._record(now, tx.asset, rec.state.value, new.state.value, tx_kind(tx))
        return None

    def _record(self, now, asset, before, after, cause) -> None:
        self.transitions.append(Transition(now, asset, before, after, cause))

    # -- queries -----------------------------------------------------------
    def find_public(self, public_id: bytes) -> AssetRecord | None:
        for rec in self.assets.values():
            if public_id in (rec.public_id, rec.local_public_id):
                return rec
        return None

    def query_asset(self, asset_id: bytes, requester_chain: str | None = None) -> QueryResult:
        """Look up by public id from anywhere, or by private id from inside this chain."""
        rec = self.find_public(asset_id)
        if rec is None and requester_chain == self.chain_id:
            rec = self.assets.get(asset_id)
        if rec is None:
            return NOT_FOUND
        if rec.state is AssetState.INVALIDATED:
            return QueryResult("Redirect", rec.remote_chain, rec.remote_public_id)
        return QueryResult(rec.state.value, owner=rec.owner)


def _asset_of(tx: LedgerTx) -> bytes:
    return tx.private_id if isinstance(tx, Register) else tx.asset
