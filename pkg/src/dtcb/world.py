"""The simulated world: two or more ledgers, their gateways, a lossy network and a script.

Everything runs in one thread off a single seeded ``random.Random``; the event
log is a pure function of the scenario and seed.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any

from .encoding import DecodeError, encode
from .gateway import (
    TRUST_CHALLENGE,
    Context,
    CoSigner,
    DeadlineReached,
    Directory,
    GatewayProfile,
    GatewayState,
    Phase,
    Role,
    TransferNoticed,
    TxConfirmed,
    TxIncluded,
    WireMessage,
    handle_message,
)
from .ledger import AssetState, Ledger, LedgerTx, Register, TransferOut, tx_kind
from .sim import EventLog, EventQueue, Link, Network


@dataclass(frozen=True)
class BlockDue:
    chain_id: str


@dataclass(frozen=True)
class Delivery:
    src: str
    dst: str
    data: bytes


@dataclass(frozen=True)
class Timer:
    node_id: str
    session: bytes
    tick: int


@dataclass(frozen=True)
class ScriptAction:
    index: int
    spec: dict


@dataclass
class GatewayNode:
    profile: GatewayProfile
    sessions: dict[bytes, GatewayState] = field(default_factory=dict)

    @property
    def node_id(self) -> str:
        return self.profile.node_id


@dataclass
class TransferRecord:
    label: str
    source_chain: str
    dest_chain: str
    dest_owner: bytes
    asset: bytes
    session: bytes | None = None


class SimWorld:
    def __init__(
        self,
        seed: int,
        ledgers: dict[str, Ledger],
        directory: Directory,
        gateways: dict[str, GatewayProfile],
        network: Network | None = None,
        users: dict[str, bytes] | None = None,
        script: list[dict] | None = None,
    ):
        self.seed = seed
        self.rng = random.Random(seed)
        self.now = 0
        self.queue = EventQueue()
        self.log = EventLog()
        self.ledgers = ledgers
        self.directory = directory
        self.nodes = {nid: GatewayNode(p) for nid, p in gateways.items()}
        self.network = network or Network()
        self.users = dict(users or {})
        self.script = list(script or [])
        self.crashed: set[str] = set()
        self.corrupt_next: set[str] = set()
        self.watch: dict[tuple[str, int], tuple[str, bytes, LedgerTx]] = {}
        self.wire_log: list[bytes] = []
        self.phase_log: list[tuple[int, str, Role, Phase, Phase]] = []
        self.trust_log: dict[tuple[str, bytes], int] = {}
        self.register_log: list[tuple[int, str, bytes]] = []
        self.script_failures: list[str] = []
        self.txid_origin: dict[bytes, tuple[str, bytes]] = {}
        self.transfers: list[TransferRecord] = []
        self.auditor = Auditor()
        for chain_id, ledger in ledgers.items():
            self.queue.push(ledger.block_interval, BlockDue(chain_id))
        for i, action in enumerate(self.script):
            self.queue.push(int(action.get("tick", 0)), ScriptAction(i, action))

    # -- driving -----------------------------------------------------------
    def step(self) -> list[str]:
        """Run every event at the next occupied tick; return the new log lines."""
        tick = self.queue.next_tick()
        if tick is None:
            return []
        start = len(self.log.lines)
        self.now = tick
        while (event := self.queue.pop_at(tick)) is not None:
            self._handle(event)
        self.auditor.observe(self)
        return self.log.lines[start:]

    def run(self, tick_limit: int = 100_000, stop_when_quiescent: bool = True) -> None:
        while True:
            nxt = self.queue.next_tick()
            if nxt is None or nxt > tick_limit:
                break
            if stop_when_quiescent and self.quiescent():
                break
            self.step()

    def quiescent(self) -> bool:
        for event in self.queue:
            if isinstance(event, (Delivery, ScriptAction)):
                return False
        if any(ledger.pending for ledger in self.ledgers.values()):
            return False
        for ledger in self.ledgers.values():
            if any(r.state is AssetState.LOCKED for r in ledger.assets.values()):
                return False
        for node in self.nodes.values():
            if node.node_id in self.crashed:
                continue
            if any(not s.terminal for s in node.sessions.values()):
                return False
        return True

    # -- event handling ------------------------------------------------------
    def _handle(self, event: Any) -> None:
        if isinstance(event, BlockDue):
            self._produce_block(event.chain_id)
        elif isinstance(event, Delivery):
            self._deliver(event)
        elif isinstance(event, Timer):
            if event.node_id in self.crashed:
                return
            node = self.nodes[event.node_id]
            state = node.sessions.get(event.session)
            if state is not None and not state.terminal:
                self._dispatch(node, event.session, state, DeadlineReached(event.tick))
        elif isinstance(event, ScriptAction):
            self._run_action(event)

    def _produce_block(self, chain_id: str) -> None:
        ledger = self.ledgers[chain_id]
        events = ledger.produce_block(self.now)
        block = ledger.blocks[-1]
        self.log.record(
            self.now, chain_id, "block", block.to_bytes(),
            f"height={block.height} txs={len(block.txs)}",
        )
        for ev in events:
            label = self._label(chain_id, ev.asset)
            self.log.record(self.now, chain_id, ev.kind, ev.payload(), f"{ev.summary} asset={label}")
        for ev in events:
            if ev.seq is None:
                continue
            watched = self.watch.get((chain_id, ev.seq))
            if watched is not None:
                node_id, session, tx = watched
                self._notify(node_id, session, TxIncluded(tx, ev.kind == "tx_applied"))
                if ev.kind != "tx_applied":
                    self.watch.pop((chain_id, ev.seq), None)
            if ev.kind == "tx_applied" and isinstance(ev.tx, TransferOut):
                self._notice_transfer(chain_id, ev.tx)
        for (c, seq), (node_id, session, tx) in list(self.watch.items()):
            if c == chain_id and ledger.is_confirmed(seq):
                del self.watch[(c, seq)]
                self.log.record(self.now, chain_id, "tx_confirmed", tx.encode(), tx_kind(tx))
                self._notify(node_id, session, TxConfirmed(tx))
        self.queue.push(self.now + ledger.block_interval, BlockDue(chain_id))

    def _notice_transfer(self, chain_id: str, tx: TransferOut) -> None:
        if tx.gateway in self.crashed or tx.gateway not in self.nodes:
            return
        rec = self.ledgers[chain_id].assets[tx.asset]
        node = self.nodes[tx.gateway]
        state = GatewayState(Role.SOURCE)
        notice = TransferNoticed(tx.asset, tx.dest_chain, tx.dest_pubkey, rec.value)
        key = self._dispatch(node, None, state, notice)
        for t in self.transfers:
            if t.asset == tx.asset and t.session is None:
                t.session = key
                break

    def _notify(self, node_id: str, session: bytes, msg) -> None:
        if node_id in self.crashed:
            return
        node = self.nodes[node_id]
        state = node.sessions.get(session)
        if state is not None:
            self._dispatch(node, session, state, msg)

    def _deliver(self, ev: Delivery) -> None:
        if ev.dst in self.crashed or ev.dst not in self.nodes:
            self.log.record(self.now, "net", "drop_crashed", ev.data, f"{ev.src}->{ev.dst}")
            return
        node = self.nodes[ev.dst]
        chain = node.profile.chain_id
        try:
            msg = WireMessage.from_bytes(ev.data)
        except DecodeError as exc:
            self.log.record(self.now, chain, "malformed", ev.data, f"{ev.src}->{ev.dst}: {exc}")
            return
        self.log.record(self.now, chain, "deliver", ev.data, f"{msg.name} {ev.src}->{ev.dst}")
        state = node.sessions.get(msg.session)
        if state is None:
            if msg.kind != TRUST_CHALLENGE:
                self.log.record(
                    self.now, chain, "note", ev.data, f"{ev.dst}: unexpected {msg.name} without session"
                )
                return
            state = GatewayState(Role.DESTINATION)
        self._dispatch(node, msg.session, state, msg)

    # -- gateway effects -----------------------------------------------------
    def _context(self, node: GatewayNode, state: GatewayState) -> Context:
        entropy = (self.rng.randbytes(32), self.rng.randbytes(32))
        cosigners = ()
        if state.role is Role.SOURCE and state.transfer.asset is not None:
            cosigners = tuple(
                CoSigner(
                    g.node_id,
                    g.profile.key,
                    online=g.node_id not in self.crashed,
                    approves=self._approval_check(g.profile.chain_id, node.node_id, state.transfer.asset),
                )
                for g in self.nodes.values()
                if g.profile.chain_id == node.profile.chain_id
            )
        return Context(node.profile, self.directory, entropy, cosigners)

    def _approval_check(self, chain_id: str, requester: str, asset: bytes):
        def approves(_payload: bytes) -> bool:
            rec = self.ledgers[chain_id].assets.get(asset)
            return rec is not None and rec.state is AssetState.LOCKED and rec.lock_holder == requester

        return approves

    def _dispatch(self, node: GatewayNode, key: bytes | None, state: GatewayState, msg) -> bytes:
        res = handle_message(state, msg, self.now, self._context(node, state))
        new = res.state
        chain = node.profile.chain_id
        key = key if key is not None else (new.session_nonce or self.rng.randbytes(32))
        for note in res.notes:
            self.log.record(self.now, chain, "note", encode(node.node_id, note), f"{node.node_id}: {note}")
        for before, after in res.transitions:
            self.phase_log.append((self.now, node.node_id, new.role, before, after))
            self.log.record(
                self.now, chain, "phase", encode(node.node_id, key, before.value, after.value),
                f"{node.node_id} {new.role.value} {before.value}->{after.value}",
            )
        if res.trust_established:
            self.trust_log[(node.node_id, key)] = self.now
            self.log.record(
                self.now, chain, "trust_established", encode(node.node_id, key),
                f"{node.node_id} peer={new.peer_node}",
            )
        if new.role is Role.SOURCE and new.transfer.txid1 is not None:
            self.txid_origin.setdefault(new.transfer.txid1, (chain, new.transfer.asset))
        for tx in res.submissions:
            self._submit(node, key, tx, tracked=tx is new.pending_tx)
        for dst, data in res.messages:
            self._send(node.node_id, dst, data)
        for tick in res.timers:
            self.queue.push(tick, Timer(node.node_id, key, tick))
        if new.role is Role.DESTINATION and new.phase is Phase.IDLE:
            node.sessions.pop(key, None)
        else:
            node.sessions[key] = new
        return key

    def _submit(self, node: GatewayNode, session: bytes, tx: LedgerTx, tracked: bool) -> None:
        chain = node.profile.chain_id
        receipt = self.ledgers[chain].submit_tx(tx)
        if isinstance(tx, Register):
            self.register_log.append((self.now, node.node_id, session))
        if not receipt.accepted:
            self.log.record(self.now, chain, "tx_rejected", tx.encode(), f"{tx_kind(tx)}: {receipt.reason}")
            return
        self.log.record(self.now, chain, "submit", tx.encode(), f"{tx_kind(tx)} by {node.node_id}")
        if tracked:
            self.watch[(chain, receipt.seq)] = (node.node_id, session, tx)

    def _send(self, src: str, dst: str, data: bytes) -> None:
        if src in self.corrupt_next:
            self.corrupt_next.discard(src)
            bit = self.rng.randrange(len(data) * 8)
            buf = bytearray(data)
            buf[bit // 8] ^= 1 << (bit % 8)
            data = bytes(buf)
            self.log.record(self.now, "net", "corrupt", data, f"{src}->{dst} bit={bit}")
        self.wire_log.append(data)
        delays = self.network.sample(self.rng, src, dst)
        if not delays:
            self.log.record(self.now, "net", "drop", data, f"{src}->{dst}")
            return
        for d in delays:
            self.log.record(self.now, "net", "send", data, f"{src}->{dst} delay={d}")
            self.queue.push(self.now + d, Delivery(src, dst, data))

    # -- script -------------------------------------------------------------
    def _run_action(self, ev: ScriptAction) -> None:
        spec = ev.spec
        kind = spec.get("action")
        summary = f"#{ev.index} {kind}"
        try:
            if kind == "transfer":
                self._script_transfer(spec)
            elif kind == "crash":
                self._require_node(spec["node"])
                self.crashed.add(spec["node"])
            elif kind == "recover":
                self._require_node(spec["node"])
                self.crashed.discard(spec["node"])
            elif kind == "corrupt_next_message":
                self._require_node(spec["node"])
                self.corrupt_next.add(spec["node"])
            elif kind == "set_link":
                self.network.links[(spec["from"], spec["to"])] = Link(
                    int(spec.get("delay_min", 1)),
                    int(spec.get("delay_max", spec.get("delay_min", 1))),
                    float(spec.get("drop_probability", 0.0)),
                    float(spec.get("duplicate_probability", 0.0)),
                )
            else:
                raise ValueError(f"unknown action {kind!r}")
        except (KeyError, ValueError) as exc:
            self.script_failures.append(f"{summary}: {exc}")
            self.log.record(self.now, "script", "script_failed", encode(summary, str(exc)), f"{summary}: {exc}")
            return
        self.log.record(self.now, "script", "script", encode(summary), summary)

    def _require_node(self, node_id: str) -> None:
        if node_id not in self.nodes:
            raise ValueError(f"unknown node {node_id}")

    def _script_transfer(self, spec: dict) -> None:
        label = spec["asset"]
        found = None
        for chain_id, ledger in self.ledgers.items():
            for pid, rec in ledger.assets.items():
                if rec.label == label and not rec.registered:
                    found = (chain_id, pid)
        if found is None:
            raise ValueError(f"unknown asset {label}")
        chain_id, pid = found
        dest_chain = spec["to_chain"]
        if dest_chain not in self.ledgers:
            raise ValueError(f"unknown chain {dest_chain}")
        if spec["to_user"] not in self.users:
            raise ValueError(f"unknown user {spec['to_user']}")
        gateway = spec.get("gateway") or self.directory.delegate.get(chain_id)
        if gateway is None:
            raise ValueError(f"no gateway on {chain_id}")
        dest_owner = self.users[spec["to_user"]]
        tx = TransferOut(pid, dest_chain, dest_owner, gateway, submitter=spec.get("from_user", ""))
        receipt = self.ledgers[chain_id].submit_tx(tx)
        if not receipt.accepted:
            raise ValueError(receipt.reason)
        self.transfers.append(TransferRecord(label, chain_id, dest_chain, dest_owner, pid))
        self.log.record(self.now, chain_id, "submit", tx.encode(), f"TransferOut {label} -> {dest_chain}")

    # -- helpers -------------------------------------------------------------
    def _label(self, chain_id: str, asset: bytes | None) -> str:
        if asset is None:
            return "-"
        rec = self.ledgers[chain_id].assets.get(asset)
        if rec is None:
            return "(removed)"
        return self.auditor.label_of(self, rec) or "(unlinked)"

    def session_states(self, node_id: str) -> list[GatewayState]:
        return list(self.nodes[node_id].sessions.values())


class Auditor:
    """Scans every ledger after each step for exclusivity breaks and hazards."""

    def __init__(self):
        self.exclusivity_violations: list[tuple[int, str]] = []
        self.hazards: dict[str, int] = {}
        self.timeline: list[tuple[int, str, tuple[tuple[str, str], ...]]] = []
        self._last: dict[str, tuple] = {}

    @staticmethod
    def label_of(world: SimWorld, rec) -> str | None:
        if not rec.registered:
            return rec.label
        origin = world.txid_origin.get(rec.origin_public_id)
        if origin is None:
            return None
        src = world.ledgers[origin[0]].assets.get(origin[1])
        return src.label if src is not None else None

    def snapshot(self, world: SimWorld) -> dict[str, dict[str, list[str]]]:
        states: dict[str, dict[str, list[str]]] = {}
        for chain_id, ledger in world.ledgers.items():
            for rec in ledger.assets.values():
                label = self.label_of(world, rec) or "(unlinked)"
                states.setdefault(label, {}).setdefault(chain_id, []).append(rec.state.value)
        return states

    def observe(self, world: SimWorld) -> None:
        states = self.snapshot(world)
        for label in sorted(states):
            per_chain = states[label]
            active = sum(s.count("Active") for s in per_chain.values())
            if active > 1:
                self.exclusivity_violations.append((world.now, label))
            summary = tuple(sorted((c, "+".join(v)) for c, v in per_chain.items()))
            if self._last.get(label) != summary:
                self._last[label] = summary
                self.timeline.append((world.now, label, summary))
        for chain_id, ledger in world.ledgers.items():
            for rec in ledger.assets.values():
                if rec.state is not AssetState.INVALIDATED or rec.label in self.hazards:
                    continue
                remote = world.ledgers.get(rec.remote_chain)
                if remote is None or remote.find_public(rec.remote_public_id) is None:
                    self.hazards[rec.label] = world.now
                    world.log.record(
                        world.now, chain_id, "hazard", encode(rec.label),
                        f"asset {rec.label} invalidated here but absent on {rec.remote_chain}",
                    )
