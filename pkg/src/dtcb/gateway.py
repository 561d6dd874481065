"""Cross-chain transfer protocol between a source gateway and a destination gateway.

The source (G1) notices an outbound TransferOut, establishes mutual trust with
the destination (G2) through a four-message challenge/evidence exchange, masks
the asset id and requests registration. G2 registers the asset locked, asserts
the registration once confirmed, G1 invalidates locally and, once that is
confirmed, asserts the invalidation so G2 can release the lock.

``handle_message`` is a pure transition function: state and input in, new
state plus effects (wire messages, ledger submissions, timers) out. Fresh
randomness arrives through ``Context.entropy`` so the caller keeps control of
the seeded generator.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

from . import crypto
from .attestation import (
    Capabilities,
    DtcbPolicy,
    Manifest,
    MembershipCredential,
    Quote,
    Registers,
    create_quote,
    evaluate_policy,
    prove_possession,
    verify_manifest,
    verify_membership,
    verify_possession,
    verify_quote,
)
from .crypto import ContractViolation, KeyPair
from .dice import DeviceIdentity
from .encoding import DecodeError, decode, decode_fixed, decode_int, decode_str, encode
from .ledger import Invalidate, LedgerTx, Register, Rollback, Unlock
from .verdict import Verdict

# wire message kinds (1-byte header)
TRUST_CHALLENGE = 0x10
TRUST_EVIDENCE = 0x11
TRANSFER_REQUEST = 0x12
REGISTERED_ASSERTION = 0x13
INVALIDATED_ASSERTION = 0x14
ERROR = 0x15

KIND_NAMES = {
    TRUST_CHALLENGE: "TrustChallenge",
    TRUST_EVIDENCE: "TrustEvidence",
    TRANSFER_REQUEST: "TransferRequest",
    REGISTERED_ASSERTION: "RegisteredAssertion",
    INVALIDATED_ASSERTION: "InvalidatedAssertion",
    ERROR: "Error",
}
_BODY_FIELDS = {
    TRUST_CHALLENGE: 2,
    TRUST_EVIDENCE: 3,
    TRANSFER_REQUEST: 5,
    REGISTERED_ASSERTION: 1,
    INVALIDATED_ASSERTION: 2,
    ERROR: 1,
}


class Role(enum.Enum):
    SOURCE = "Source"
    DESTINATION = "Destination"


class Phase(enum.Enum):
    IDLE = "Idle"
    TRUST_ESTABLISHING = "TrustEstablishing"
    # source
    AWAIT_REGISTRATION = "AwaitRegistration"
    AWAIT_REGISTRATION_ASSERTION = "AwaitRegistrationAssertion"
    INVALIDATION_SUBMITTED = "InvalidationSubmitted"
    AWAIT_INVALIDATION_CONFIRM = "AwaitInvalidationConfirm"
    FINAL_ASSERTION_SENT = "FinalAssertionSent"
    ABORTED = "Aborted"
    # destination
    REGISTRATION_SUBMITTED = "RegistrationSubmitted"
    AWAIT_LOCAL_CONFIRM = "AwaitLocalConfirm"
    REGISTRATION_ASSERTION_SENT = "RegistrationAssertionSent"
    AWAIT_INVALIDATION_ASSERTION = "AwaitInvalidationAssertion"
    UNLOCK_SUBMITTED = "UnlockSubmitted"
    ROLLED_BACK = "RolledBack"
    DONE = "Done"


TERMINAL = {Phase.DONE, Phase.ABORTED, Phase.ROLLED_BACK}

P = Phase
SOURCE_EDGES = {
    (P.IDLE, P.TRUST_ESTABLISHING),
    (P.TRUST_ESTABLISHING, P.AWAIT_REGISTRATION),
    (P.AWAIT_REGISTRATION, P.AWAIT_REGISTRATION_ASSERTION),
    (P.AWAIT_REGISTRATION_ASSERTION, P.INVALIDATION_SUBMITTED),
    (P.INVALIDATION_SUBMITTED, P.AWAIT_INVALIDATION_CONFIRM),
    (P.AWAIT_INVALIDATION_CONFIRM, P.FINAL_ASSERTION_SENT),
    (P.FINAL_ASSERTION_SENT, P.DONE),
    (P.IDLE, P.ABORTED),
    (P.TRUST_ESTABLISHING, P.ABORTED),
    (P.AWAIT_REGISTRATION, P.ABORTED),
    (P.AWAIT_REGISTRATION_ASSERTION, P.ABORTED),
    # the Invalidate transaction itself failed: nothing was committed
    (P.INVALIDATION_SUBMITTED, P.ABORTED),
}
DESTINATION_EDGES = {
    (P.IDLE, P.TRUST_ESTABLISHING),
    (P.TRUST_ESTABLISHING, P.IDLE),
    (P.TRUST_ESTABLISHING, P.REGISTRATION_SUBMITTED),
    (P.REGISTRATION_SUBMITTED, P.AWAIT_LOCAL_CONFIRM),
    (P.AWAIT_LOCAL_CONFIRM, P.REGISTRATION_ASSERTION_SENT),
    (P.REGISTRATION_ASSERTION_SENT, P.AWAIT_INVALIDATION_ASSERTION),
    (P.AWAIT_INVALIDATION_ASSERTION, P.UNLOCK_SUBMITTED),
    (P.UNLOCK_SUBMITTED, P.DONE),
    (P.REGISTRATION_SUBMITTED, P.ROLLED_BACK),
    (P.AWAIT_LOCAL_CONFIRM, P.ROLLED_BACK),
    (P.AWAIT_INVALIDATION_ASSERTION, P.ROLLED_BACK),
    (P.UNLOCK_SUBMITTED, P.ROLLED_BACK),
}
EDGES = {Role.SOURCE: SOURCE_EDGES, Role.DESTINATION: DESTINATION_EDGES}


# -- policy and identity ------------------------------------------------------


@dataclass(frozen=True)
class PeeringPolicy:
    dtcb_policy: DtcbPolicy
    quorum_m: int = 1
    quorum_n: int = 1
    sensitive_threshold: int = 2**63
    grace_blocks: int = 10
    trust_timeout_ticks: int = 200

    def __post_init__(self):
        if not 1 <= self.quorum_m <= self.quorum_n:
            raise ContractViolation("need 1 <= quorum_m <= quorum_n")


@dataclass(frozen=True)
class GatewayProfile:
    """Everything a gateway node presents or checks during trust establishment."""

    node_id: str
    chain_id: str
    identity: DeviceIdentity
    registers: Registers
    manifest: Manifest
    policy: PeeringPolicy
    credential: MembershipCredential | None = None
    pseudonym: KeyPair | None = field(default=None, repr=False)
    capabilities: Capabilities = Capabilities()

    @property
    def key(self) -> KeyPair:
        return self.identity.top_alias


@dataclass(frozen=True)
class ChainParams:
    block_interval: int
    confirmation_depth: int


@dataclass
class Directory:
    """Authorized gateways: alias keys vouched for by the group authority."""

    keys: dict[str, bytes] = field(default_factory=dict)
    chain_of: dict[str, str] = field(default_factory=dict)
    delegate: dict[str, str] = field(default_factory=dict)
    chains: dict[str, ChainParams] = field(default_factory=dict)

    def gateway_keys(self, chain_id: str) -> set[bytes]:
        return {k for n, k in self.keys.items() if self.chain_of.get(n) == chain_id}


# -- identifiers and assertions ----------------------------------------------


def mask_txid(private_id: bytes, chain_id: str, nonce: bytes) -> bytes:
    crypto._require_len("nonce", nonce, 32)
    return crypto.hash(crypto.tagged(crypto.TAG_MASK, encode(chain_id, private_id, nonce)))


@dataclass(frozen=True)
class SignedAssertion:
    kind: str  # Registered | Invalidated
    txid1_public: bytes
    txid2_public: bytes
    asserter: bytes
    session_nonce: bytes
    signature: bytes = b""

    def signed_payload(self) -> bytes:
        return crypto.tagged(
            crypto.TAG_ASSERTION,
            encode(self.kind, self.txid1_public, self.txid2_public, self.asserter, self.session_nonce),
        )

    def with_signature(self, key: KeyPair) -> "SignedAssertion":
        return replace(self, signature=key.sign(self.signed_payload()))

    def verify(self) -> bool:
        return crypto.verify(self.asserter, self.signed_payload(), self.signature)

    def to_bytes(self) -> bytes:
        return encode(
            self.kind,
            self.txid1_public,
            self.txid2_public,
            self.asserter,
            self.session_nonce,
            self.signature,
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SignedAssertion":
        kind, t1, t2, asserter, nonce, sig = decode(blob, 6)
        kind_s = decode_str(kind)
        if kind_s not in ("Registered", "Invalidated"):
            raise DecodeError(f"unknown assertion kind {kind_s!r}")
        return cls(
            kind_s,
            decode_fixed(t1, 32),
            decode_fixed(t2, 32),
            decode_fixed(asserter, 32),
            decode_fixed(nonce, 32),
            decode_fixed(sig, 64),
        )


# -- quorum ---------------------------------------------------------------------


class QuorumRefused(Exception):
    pass


@dataclass
class CoSigner:
    node_id: str
    key: KeyPair = field(repr=False)
    online: bool = True
    approves: Callable[[bytes], bool] | None = None


def quorum_approve(
    gateways: Sequence[CoSigner],
    payload: bytes,
    policy: PeeringPolicy,
    authorized: Iterable[bytes] | None = None,
) -> list[tuple[bytes, bytes]]:
    """Collect signatures over ``payload`` from every live, willing gateway.

    Raises QuorumRefused when fewer than ``policy.quorum_m`` distinct
    authorized gateways sign.
    """
    allowed = None if authorized is None else set(authorized)
    live = [g for g in gateways if g.online]
    if len({g.key.public_key for g in live}) < policy.quorum_m:
        raise QuorumRefused("quorum unreachable")
    signatures = []
    counted = set()
    for g in live:
        if g.approves is not None and not g.approves(payload):
            continue
        signatures.append((g.key.public_key, g.key.sign(payload)))
        if allowed is None or g.key.public_key in allowed:
            counted.add(g.key.public_key)
    if len(counted) < policy.quorum_m:
        raise QuorumRefused("quorum not reached")
    return signatures


def verify_quorum(
    payload: bytes,
    signatures: Iterable[tuple[bytes, bytes]],
    authorized_set: Iterable[bytes],
    m: int,
) -> bool:
    allowed = set(authorized_set)
    signers = set()
    for pk, sig in signatures:
        if pk in allowed and pk not in signers and crypto.verify(pk, payload, sig):
            signers.add(pk)
    return len(signers) >= m


def encode_signatures(signatures: Iterable[tuple[bytes, bytes]]) -> list[bytes]:
    return [encode(pk, sig) for pk, sig in signatures]


def decode_signatures(blob: bytes) -> list[tuple[bytes, bytes]]:
    out = []
    for item in decode(blob):
        pk, sig = decode(item, 2)
        out.append((pk, sig))
    return out


# -- wire format ----------------------------------------------------------------


@dataclass(frozen=True)
class WireMessage:
    kind: int
    sender: str
    session: bytes
    body: tuple

    @property
    def name(self) -> str:
        return KIND_NAMES.get(self.kind, f"0x{self.kind:02x}")

    def to_bytes(self) -> bytes:
        return bytes([self.kind]) + encode(self.sender, self.session, *self.body)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "WireMessage":
        if not blob:
            raise DecodeError("empty message")
        kind = blob[0]
        if kind not in _BODY_FIELDS:
            raise DecodeError(f"unknown message kind 0x{kind:02x}")
        fields = decode(blob[1:], 2 + _BODY_FIELDS[kind])
        return cls(kind, decode_str(fields[0]), decode_fixed(fields[1], 32), tuple(fields[2:]))


# -- trust establishment helpers --------------------------------------------------


def check_credential(cred_bytes: bytes, policy: PeeringPolicy) -> tuple[Verdict, MembershipCredential | None]:
    if not cred_bytes:
        return Verdict.reject("no membership credential"), None
    try:
        cred = MembershipCredential.from_bytes(cred_bytes)
    except DecodeError:
        return Verdict.reject("malformed membership credential"), None
    if not verify_membership(cred, policy.dtcb_policy.group_authority_key):
        return Verdict.reject("invalid membership credential"), None
    return Verdict.accept(), cred


def make_evidence(profile: GatewayProfile, peer_nonce: bytes) -> tuple[bytes, bytes, bytes]:
    """Quote over the peer's challenge, the signed manifest and a pseudonym proof."""
    quote = create_quote(profile.identity, profile.registers, peer_nonce, profile.capabilities)
    proof = prove_possession(profile.pseudonym, peer_nonce) if profile.pseudonym else b""
    return quote.to_bytes(), profile.manifest.to_bytes(), proof


def check_evidence(
    body: Sequence[bytes],
    expected_key: bytes,
    my_nonce: bytes,
    policy: PeeringPolicy,
    peer_credential: MembershipCredential | None,
    *,
    issued_at: int | None = None,
    now: int | None = None,
) -> Verdict:
    quote_b, manifest_b, proof = body
    try:
        quote = Quote.from_bytes(quote_b)
        manifest = Manifest.from_bytes(manifest_b)
    except DecodeError as exc:
        return Verdict.reject(f"malformed evidence: {exc}")
    v = verify_quote(
        quote, expected_key, my_nonce, policy.dtcb_policy, issued_at=issued_at, now=now
    )
    if not v:
        return Verdict.reject(f"quote {v.reason}")
    v = verify_manifest(manifest, expected_key)
    if not v:
        return Verdict.reject(f"manifest {v.reason}")
    v = evaluate_policy(manifest, policy.dtcb_policy)
    if not v:
        return Verdict.reject(f"noncompliant: {v.reason}")
    if peer_credential is None or not verify_possession(peer_credential, my_nonce, proof):
        return Verdict.reject("membership possession proof failed")
    return Verdict.accept()


@dataclass(frozen=True)
class TrustOutcome:
    established: bool
    reason: str | None
    transcript: tuple[tuple[str, str], ...]
    initiator_peer_key: bytes | None = None
    responder_peer_key: bytes | None = None

    def sent_by(self, node_id: str) -> int:
        return sum(1 for sender, _ in self.transcript if sender == node_id)


def establish_trust(
    initiator: GatewayProfile,
    responder: GatewayProfile,
    policy: PeeringPolicy | None = None,
    *,
    directory: Directory | None = None,
    initiator_nonce: bytes = b"\x11" * 32,
    responder_nonce: bytes = b"\x22" * 32,
    now: int = 0,
) -> TrustOutcome:
    """Run the four-message exchange in memory between two gateways.

    The responder checks the initiator's credential before disclosing any
    evidence of its own. No state survives a rejection.
    """
    pol_i = policy or initiator.policy
    pol_r = policy or responder.policy
    keys = directory.keys if directory else {
        initiator.node_id: initiator.key.public_key,
        responder.node_id: responder.key.public_key,
    }
    transcript: list[tuple[str, str]] = []

    def reject(sender: str, reason: str) -> TrustOutcome:
        transcript.append((sender, "Error"))
        return TrustOutcome(False, reason, tuple(transcript))

    cred_i = initiator.credential.to_bytes() if initiator.credential else b""
    transcript.append((initiator.node_id, "TrustChallenge"))
    ok, cred_i_obj = check_credential(cred_i, pol_r)
    if not ok:
        return reject(responder.node_id, ok.reason)

    cred_r = responder.credential.to_bytes() if responder.credential else b""
    transcript.append((responder.node_id, "TrustChallenge"))
    ok, cred_r_obj = check_credential(cred_r, pol_i)
    if not ok:
        return reject(initiator.node_id, ok.reason)

    try:
        evidence_i = make_evidence(initiator, responder_nonce)
    except ContractViolation as exc:
        return reject(initiator.node_id, str(exc))
    transcript.append((initiator.node_id, "TrustEvidence"))
    ok = check_evidence(
        evidence_i, keys.get(initiator.node_id, b""), responder_nonce, pol_r, cred_i_obj,
        issued_at=now, now=now,
    )
    if not ok:
        return reject(responder.node_id, ok.reason)

    try:
        evidence_r = make_evidence(responder, initiator_nonce)
    except ContractViolation as exc:
        return reject(responder.node_id, str(exc))
    transcript.append((responder.node_id, "TrustEvidence"))
    ok = check_evidence(
        evidence_r, keys.get(responder.node_id, b""), initiator_nonce, pol_i, cred_r_obj,
        issued_at=now, now=now,
    )
    if not ok:
        return reject(initiator.node_id, ok.reason)
    return TrustOutcome(
        True,
        None,
        tuple(transcript),
        initiator_peer_key=keys[responder.node_id],
        responder_peer_key=keys[initiator.node_id],
    )


# -- state machine --------------------------------------------------------------


@dataclass(frozen=True)
class TransferNoticed:
    asset: bytes
    dest_chain: str
    dest_owner: bytes
    value: int


@dataclass(frozen=True)
class TxIncluded:
    tx: LedgerTx
    ok: bool


@dataclass(frozen=True)
class TxConfirmed:
    tx: LedgerTx


@dataclass(frozen=True)
class DeadlineReached:
    tick: int


@dataclass(frozen=True)
class Transfer:
    asset: bytes | None = None  # private id on this gateway's own chain
    value: int = 0
    source_chain: str = ""
    dest_chain: str = ""
    dest_owner: bytes = b""
    txid1: bytes | None = None
    txid2: bytes | None = None


@dataclass(frozen=True)
class GatewayState:
    role: Role
    phase: Phase = Phase.IDLE
    session_nonce: bytes | None = None
    my_nonce: bytes | None = None
    my_nonce_issued_at: int | None = None
    peer_nonce: bytes | None = None
    peer_node: str | None = None
    peer_key: bytes | None = None
    peer_credential: MembershipCredential | None = None
    trusted: bool = False
    transfer: Transfer = Transfer()
    deadline: int | None = None
    pending_tx: LedgerTx | None = None
    cosignatures: tuple[tuple[bytes, bytes], ...] = ()

    @property
    def terminal(self) -> bool:
        return self.phase in TERMINAL


@dataclass(frozen=True)
class Context:
    profile: GatewayProfile
    directory: Directory
    entropy: tuple[bytes, ...] = ()
    cosigners: tuple[CoSigner, ...] = ()


@dataclass
class StepResult:
    state: GatewayState
    messages: list[tuple[str, bytes]] = field(default_factory=list)
    submissions: list[LedgerTx] = field(default_factory=list)
    timers: list[int] = field(default_factory=list)
    transitions: list[tuple[Phase, Phase]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    trust_established: bool = False


class _Step:
    def __init__(self, state: GatewayState, ctx: Context):
        self.state = state
        self.ctx = ctx
        self.out = StepResult(state)

    def go(self, phase: Phase, **changes) -> None:
        if phase != self.state.phase:
            self.out.transitions.append((self.state.phase, phase))
        self.state = replace(self.state, phase=phase, **changes)

    def update(self, **changes) -> None:
        self.state = replace(self.state, **changes)

    def send(self, kind: int, *body) -> None:
        msg = WireMessage(kind, self.ctx.profile.node_id, self.state.session_nonce, tuple(body))
        self.out.messages.append((self.state.peer_node, msg.to_bytes()))

    def submit(self, tx: LedgerTx, track: bool = True) -> None:
        self.out.submissions.append(tx)
        if track:
            self.update(pending_tx=tx)

    def note(self, text: str) -> None:
        self.out.notes.append(text)

    def result(self) -> StepResult:
        self.out.state = self.state
        return self.out


def _entropy(ctx: Context, i: int) -> bytes:
    if len(ctx.entropy) <= i:
        raise ContractViolation("handler needs more fresh entropy")
    return ctx.entropy[i]


def handle_message(state: GatewayState, msg, now: int, ctx: Context) -> StepResult:
    """Advance one gateway session by one input.

    ``msg`` is a decoded WireMessage or a local notification (TransferNoticed,
    TxIncluded, TxConfirmed, DeadlineReached). Out-of-phase inputs are logged
    as unexpected and leave the state unchanged.
    """
    step = _Step(state, ctx)
    if state.terminal:
        step.note(f"unexpected {_input_name(msg)} in terminal phase {state.phase.value}")
        return step.result()
    try:
        if state.role is Role.SOURCE:
            _source(step, msg, now)
        else:
            _destination(step, msg, now)
    except DecodeError as exc:
        return StepResult(state, notes=[f"ignored malformed {_input_name(msg)}: {exc}"])
    return step.result()


def _input_name(msg) -> str:
    return msg.name if isinstance(msg, WireMessage) else type(msg).__name__


def _unexpected(step: _Step, msg) -> None:
    step.note(f"unexpected message {_input_name(msg)} in {step.state.phase.value}")


def _wire_ok(step: _Step, msg: WireMessage) -> bool:
    s = step.state
    if msg.session != s.session_nonce:
        step.note("session mismatch")
        return False
    if s.peer_node is not None and msg.sender != s.peer_node:
        step.note("unexpected sender")
        return False
    return True


def _registration_window(params: ChainParams, policy: PeeringPolicy) -> int:
    return (params.confirmation_depth + 1 + policy.grace_blocks) * params.block_interval


# -- source side


def _source(step: _Step, msg, now: int) -> None:
    s = step.state
    ctx = step.ctx
    profile = ctx.profile
    policy = profile.policy
    phase = s.phase

    if isinstance(msg, TransferNoticed):
        if phase is not Phase.IDLE:
            return _unexpected(step, msg)
        peer = ctx.directory.delegate.get(msg.dest_chain)
        transfer = Transfer(
            asset=msg.asset,
            value=msg.value,
            source_chain=profile.chain_id,
            dest_chain=msg.dest_chain,
            dest_owner=msg.dest_owner,
        )
        if peer is None:
            step.update(transfer=transfer)
            step.note(f"no gateway known for {msg.dest_chain}")
            step.submit(Unlock(msg.asset, profile.node_id))
            return step.go(Phase.ABORTED)
        n1 = _entropy(ctx, 0)
        deadline = now + policy.trust_timeout_ticks
        step.go(
            Phase.TRUST_ESTABLISHING,
            session_nonce=n1,
            my_nonce=n1,
            my_nonce_issued_at=now,
            peer_node=peer,
            peer_key=ctx.directory.keys.get(peer),
            transfer=transfer,
            deadline=deadline,
        )
        cred = profile.credential.to_bytes() if profile.credential else b""
        step.send(TRUST_CHALLENGE, n1, cred)
        step.out.timers.append(deadline)
        return

    if isinstance(msg, DeadlineReached):
        if s.deadline is None or msg.tick < s.deadline:
            return
        if phase in (
            Phase.TRUST_ESTABLISHING,
            Phase.AWAIT_REGISTRATION,
            Phase.AWAIT_REGISTRATION_ASSERTION,
        ):
            step.note("deadline reached; aborting")
            return _source_abort(step)
        return

    if isinstance(msg, TxIncluded):
        if phase is Phase.INVALIDATION_SUBMITTED and msg.tx == s.pending_tx:
            if msg.ok:
                return step.go(Phase.AWAIT_INVALIDATION_CONFIRM)
            step.note("invalidation failed on ledger")
            return step.go(Phase.ABORTED, pending_tx=None)
        return

    if isinstance(msg, TxConfirmed):
        if phase is Phase.AWAIT_INVALIDATION_CONFIRM and msg.tx == s.pending_tx:
            t = s.transfer
            assertion = SignedAssertion(
                "Invalidated", t.txid1, t.txid2, profile.key.public_key, s.session_nonce
            ).with_signature(profile.key)
            step.go(Phase.FINAL_ASSERTION_SENT, pending_tx=None)
            step.send(
                INVALIDATED_ASSERTION,
                assertion.to_bytes(),
                encode_signatures(s.cosignatures),
            )
            return step.go(Phase.DONE)
        return

    if not isinstance(msg, WireMessage):
        return _unexpected(step, msg)
    if not _wire_ok(step, msg):
        return

    if msg.kind == ERROR:
        reason = decode_str(msg.body[0]) if msg.body else ""
        if phase in (
            Phase.TRUST_ESTABLISHING,
            Phase.AWAIT_REGISTRATION,
            Phase.AWAIT_REGISTRATION_ASSERTION,
        ):
            step.note(f"peer error: {reason}")
            return _source_abort(step)
        return _unexpected(step, msg)

    if msg.kind == TRUST_CHALLENGE and phase is Phase.TRUST_ESTABLISHING:
        peer_nonce = decode_fixed(msg.body[0], 32)
        ok, cred = check_credential(msg.body[1], policy)
        if not ok:
            step.note(f"trust rejected: {ok.reason}")
            step.send(ERROR, ok.reason)
            return _source_abort(step)
        try:
            evidence = make_evidence(profile, peer_nonce)
        except ContractViolation as exc:
            step.note(f"cannot produce evidence: {exc}")
            step.send(ERROR, str(exc))
            return _source_abort(step)
        step.go(Phase.AWAIT_REGISTRATION, peer_nonce=peer_nonce, peer_credential=cred)
        step.send(TRUST_EVIDENCE, *evidence)
        return

    if msg.kind == TRUST_EVIDENCE and phase is Phase.AWAIT_REGISTRATION:
        ok = check_evidence(
            msg.body,
            s.peer_key or b"",
            s.my_nonce,
            policy,
            s.peer_credential,
            issued_at=s.my_nonce_issued_at,
            now=now,
        )
        if not ok:
            step.note(f"trust rejected: {ok.reason}")
            step.send(ERROR, ok.reason)
            return _source_abort(step)
        step.out.trust_established = True
        t = s.transfer
        txid1 = mask_txid(t.asset, profile.chain_id, _entropy(ctx, 0))
        dest = ctx.directory.chains[t.dest_chain]
        deadline = now + _registration_window(dest, policy)
        step.go(
            Phase.AWAIT_REGISTRATION_ASSERTION,
            trusted=True,
            transfer=replace(t, txid1=txid1),
            deadline=deadline,
        )
        step.send(TRANSFER_REQUEST, txid1, t.dest_owner, t.value, t.source_chain, t.dest_chain)
        step.out.timers.append(deadline)
        return

    if msg.kind == REGISTERED_ASSERTION and phase is Phase.AWAIT_REGISTRATION_ASSERTION:
        assertion = _check_assertion(step, msg.body[0], "Registered")
        if assertion is None:
            return
        t = replace(s.transfer, txid2=assertion.txid2_public)
        cosigs: tuple = ()
        if t.value >= policy.sensitive_threshold:
            payload = SignedAssertion(
                "Invalidated", t.txid1, t.txid2, profile.key.public_key, s.session_nonce
            ).signed_payload()
            try:
                cosigs = tuple(
                    quorum_approve(
                        ctx.cosigners,
                        payload,
                        policy,
                        ctx.directory.gateway_keys(profile.chain_id),
                    )
                )
            except QuorumRefused as exc:
                step.update(transfer=t)
                step.note(f"quorum refused: {exc}")
                return _source_abort(step)
        step.go(Phase.INVALIDATION_SUBMITTED, transfer=t, cosignatures=cosigs)
        step.submit(Invalidate(t.asset, t.txid1, t.txid2, t.dest_chain, profile.node_id))
        return

    _unexpected(step, msg)


def _source_abort(step: _Step) -> None:
    t = step.state.transfer
    if t.asset is not None:
        step.submit(Unlock(t.asset, step.ctx.profile.node_id), track=False)
    step.go(Phase.ABORTED)


def _check_assertion(step: _Step, blob: bytes, kind: str) -> SignedAssertion | None:
    s = step.state
    try:
        a = SignedAssertion.from_bytes(blob)
    except DecodeError as exc:
        step.note(f"ignored malformed assertion: {exc}")
        return None
    problems = []
    if a.kind != kind:
        problems.append("wrong assertion kind")
    if a.asserter != s.peer_key:
        problems.append("unexpected asserter")
    if a.session_nonce != s.session_nonce:
        problems.append("session mismatch")
    if a.txid1_public != s.transfer.txid1:
        problems.append("txid1 mismatch")
    if kind == "Invalidated" and a.txid2_public != s.transfer.txid2:
        problems.append("txid2 mismatch")
    if not a.verify():
        problems.append("bad signature")
    if problems:
        step.note("ignored assertion: " + ", ".join(problems))
        return None
    return a


# -- destination side


def _destination(step: _Step, msg, now: int) -> None:
    s = step.state
    ctx = step.ctx
    profile = ctx.profile
    policy = profile.policy
    phase = s.phase

    if isinstance(msg, DeadlineReached):
        if s.deadline is None or msg.tick < s.deadline:
            return
        if phase is Phase.TRUST_ESTABLISHING:
            step.note("trust window expired; session dropped")
            return step.go(Phase.IDLE)
        if phase in (
            Phase.REGISTRATION_SUBMITTED,
            Phase.AWAIT_LOCAL_CONFIRM,
            Phase.AWAIT_INVALIDATION_ASSERTION,
        ):
            step.note("lock deadline reached; rolling back")
            step.submit(Rollback(s.transfer.asset, profile.node_id), track=False)
            return step.go(Phase.ROLLED_BACK, pending_tx=None)
        return

    if isinstance(msg, TxIncluded):
        if msg.tx != s.pending_tx:
            return
        if phase is Phase.REGISTRATION_SUBMITTED:
            if msg.ok:
                return step.go(Phase.AWAIT_LOCAL_CONFIRM)
            step.note("registration failed on ledger")
            return step.go(Phase.ROLLED_BACK, pending_tx=None)
        if phase is Phase.UNLOCK_SUBMITTED:
            if msg.ok:
                return step.go(Phase.DONE, pending_tx=None)
            step.note("unlock failed on ledger")
            return step.go(Phase.ROLLED_BACK, pending_tx=None)
        return

    if isinstance(msg, TxConfirmed):
        if phase is Phase.AWAIT_LOCAL_CONFIRM and msg.tx == s.pending_tx:
            t = s.transfer
            assertion = SignedAssertion(
                "Registered", t.txid1, t.txid2, profile.key.public_key, s.session_nonce
            ).with_signature(profile.key)
            step.go(Phase.REGISTRATION_ASSERTION_SENT, pending_tx=None)
            step.send(REGISTERED_ASSERTION, assertion.to_bytes())
            step.go(Phase.AWAIT_INVALIDATION_ASSERTION)
        return

    if not isinstance(msg, WireMessage):
        return _unexpected(step, msg)

    if phase is Phase.IDLE:
        if msg.kind != TRUST_CHALLENGE:
            return _unexpected(step, msg)
        # new session: the membership check precedes any disclosure
        step.update(session_nonce=msg.session, peer_node=msg.sender)
        peer_key = ctx.directory.keys.get(msg.sender)
        if peer_key is None or ctx.directory.chain_of.get(msg.sender) == profile.chain_id:
            step.note("challenge from unknown gateway")
            step.send(ERROR, "unknown gateway")
            return
        ok, cred = check_credential(msg.body[1], policy)
        if not ok:
            step.note(f"trust rejected: {ok.reason}")
            step.send(ERROR, ok.reason)
            return
        n2 = _entropy(ctx, 0)
        deadline = now + policy.trust_timeout_ticks
        step.go(
            Phase.TRUST_ESTABLISHING,
            my_nonce=n2,
            my_nonce_issued_at=now,
            peer_nonce=decode_fixed(msg.body[0], 32),
            peer_key=peer_key,
            peer_credential=cred,
            deadline=deadline,
        )
        own = profile.credential.to_bytes() if profile.credential else b""
        step.send(TRUST_CHALLENGE, n2, own)
        step.out.timers.append(deadline)
        return

    if not _wire_ok(step, msg):
        return

    if msg.kind == ERROR:
        if phase is Phase.TRUST_ESTABLISHING:
            step.note(f"peer error: {decode_str(msg.body[0])}")
            return step.go(Phase.IDLE)
        return _unexpected(step, msg)

    if msg.kind == TRUST_EVIDENCE and phase is Phase.TRUST_ESTABLISHING and not s.trusted:
        ok = check_evidence(
            msg.body,
            s.peer_key,
            s.my_nonce,
            policy,
            s.peer_credential,
            issued_at=s.my_nonce_issued_at,
            now=now,
        )
        if not ok:
            step.note(f"trust rejected: {ok.reason}")
            step.send(ERROR, ok.reason)
            return step.go(Phase.IDLE)
        try:
            evidence = make_evidence(profile, s.peer_nonce)
        except ContractViolation as exc:
            step.note(f"cannot produce evidence: {exc}")
            step.send(ERROR, str(exc))
            return step.go(Phase.IDLE)
        step.out.trust_established = True
        step.update(trusted=True)
        step.send(TRUST_EVIDENCE, *evidence)
        return

    if msg.kind == TRANSFER_REQUEST and phase is Phase.TRUST_ESTABLISHING and s.trusted:
        txid1 = decode_fixed(msg.body[0], 32)
        dest_owner = decode_fixed(msg.body[1], 32)
        value = decode_int(msg.body[2])
        source_chain = decode_str(msg.body[3])
        dest_chain = decode_str(msg.body[4])
        if dest_chain != profile.chain_id or source_chain != ctx.directory.chain_of.get(msg.sender):
            step.note("transfer request for the wrong chains")
            step.send(ERROR, "wrong chain")
            return step.go(Phase.IDLE)
        private_id = _entropy(ctx, 0)
        txid2 = mask_txid(private_id, profile.chain_id, _entropy(ctx, 1))
        own = ctx.directory.chains[profile.chain_id]
        deadline = now + _registration_window(own, policy)
        t = Transfer(private_id, value, source_chain, dest_chain, dest_owner, txid1, txid2)
        step.go(Phase.REGISTRATION_SUBMITTED, transfer=t, deadline=deadline)
        step.submit(
            Register(private_id, txid2, dest_owner, profile.node_id, deadline, value, source_chain, txid1)
        )
        step.out.timers.append(deadline)
        return

    if msg.kind == INVALIDATED_ASSERTION and phase is Phase.AWAIT_INVALIDATION_ASSERTION:
        assertion = _check_assertion(step, msg.body[0], "Invalidated")
        if assertion is None:
            return
        if s.transfer.value >= policy.sensitive_threshold:
            try:
                sigs = decode_signatures(msg.body[1])
            except DecodeError:
                sigs = []
            authorized = ctx.directory.gateway_keys(s.transfer.source_chain)
            if not verify_quorum(assertion.signed_payload(), sigs, authorized, policy.quorum_m):
                step.note("ignored assertion: quorum not met")
                return
        step.go(Phase.UNLOCK_SUBMITTED)
        step.submit(Unlock(s.transfer.asset, profile.node_id))
        return

    _unexpected(step, msg)


def audit_edges(role: Role, transitions: Iterable[tuple[Phase, Phase]]) -> list[tuple[Phase, Phase]]:
    """Return every transition not in the declared edge set for ``role``."""
    allowed = EDGES[role]
    return [t for t in transitions if t not in allowed]

