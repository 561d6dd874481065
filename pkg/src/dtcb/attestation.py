"""Attestation evidence: measurement registers, quotes, manifests, policies, credentials."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import crypto
from .crypto import ContractViolation, KeyPair
from .dice import DeviceIdentity
from .encoding import DecodeError, decode, decode_fixed, decode_int, decode_str, encode
from .verdict import Verdict

NUM_REGISTERS = 32
ZERO_DIGEST = bytes(32)


class AttestationError(ContractViolation):
    pass


@dataclass(frozen=True)
class Registers:
    slots: tuple[bytes, ...] = (ZERO_DIGEST,) * NUM_REGISTERS

    def __post_init__(self):
        if len(self.slots) != NUM_REGISTERS:
            raise ContractViolation(f"need exactly {NUM_REGISTERS} register slots")

    def __getitem__(self, index: int) -> bytes:
        return self.slots[_check_index(index)]

    def extend(self, index: int, measurement: bytes) -> "Registers":
        return extend_register(self, index, measurement)

    def reset(self, index: int) -> "Registers":
        slots = list(self.slots)
        slots[_check_index(index)] = ZERO_DIGEST
        return Registers(tuple(slots))


def _check_index(index: int) -> int:
    if not 0 <= index < NUM_REGISTERS:
        raise IndexError(f"register index {index} out of range [0, {NUM_REGISTERS})")
    return index


def extend_register(regs: Registers, index: int, measurement: bytes) -> Registers:
    _check_index(index)
    crypto._require_len("measurement", measurement, crypto.DIGEST_SIZE)
    slots = list(regs.slots)
    slots[index] = crypto.hash(bytes([crypto.TAG_QUOTE]) + slots[index] + measurement)
    return Registers(tuple(slots))


def measured_boot(identity: DeviceIdentity, index: int = 0) -> Registers:
    """Registers after extending ``index`` with every layer digest in boot order."""
    regs = Registers()
    for m in identity.chain:
        regs = regs.extend(index, m.code_digest)
    return regs


@dataclass(frozen=True)
class Capabilities:
    # P1: the node executes a well-defined function; P2: that execution is shielded.
    well_defined: bool = True
    shielded: bool = True


@dataclass(frozen=True)
class Quote:
    signer_public_key: bytes
    register_values: tuple[bytes, ...]
    nonce: bytes
    chain_digest: bytes
    signature: bytes = b""

    def signed_payload(self) -> bytes:
        return crypto.tagged(
            crypto.TAG_QUOTE, encode(list(self.register_values), self.nonce, self.chain_digest)
        )

    def to_bytes(self) -> bytes:
        return encode(
            self.signer_public_key,
            list(self.register_values),
            self.nonce,
            self.chain_digest,
            self.signature,
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Quote":
        signer, regs, nonce, chain_digest, sig = decode(blob, 5)
        values = tuple(decode_fixed(r, 32) for r in decode(regs))
        if len(values) != NUM_REGISTERS:
            raise DecodeError(f"quote must carry {NUM_REGISTERS} registers")
        return cls(
            decode_fixed(signer, 32),
            values,
            decode_fixed(nonce, 32),
            decode_fixed(chain_digest, 32),
            decode_fixed(sig, 64),
        )


def _signing_key(identity: DeviceIdentity) -> KeyPair:
    if identity.top_alias is None:
        raise AttestationError("no signing key: identity has no alias layer")
    return identity.top_alias


def create_quote(
    identity: DeviceIdentity,
    regs: Registers,
    nonce: bytes,
    capabilities: Capabilities | None = None,
) -> Quote:
    caps = capabilities or Capabilities()
    if not caps.well_defined:
        raise AttestationError("node lacks well-defined-function capability")
    if not caps.shielded:
        raise AttestationError("node lacks shielded-execution capability")
    crypto._require_len("nonce", nonce, 32)
    key = _signing_key(identity)
    unsigned = Quote(key.public_key, regs.slots, bytes(nonce), identity.chain_digest())
    return Quote(
        unsigned.signer_public_key,
        unsigned.register_values,
        unsigned.nonce,
        unsigned.chain_digest,
        key.sign(unsigned.signed_payload()),
    )


def verify_quote(
    quote: Quote,
    expected_key: bytes,
    nonce: bytes,
    policy: "DtcbPolicy | None" = None,
    *,
    issued_at: int | None = None,
    now: int | None = None,
) -> Verdict:
    """Check signer, signature and nonce; with a policy and both ticks, also quote age."""
    if quote.signer_public_key != expected_key:
        return Verdict.reject("unexpected signer")
    if not crypto.verify(quote.signer_public_key, quote.signed_payload(), quote.signature):
        return Verdict.reject("bad signature")
    if quote.nonce != nonce:
        return Verdict.reject("nonce mismatch")
    if policy is not None and issued_at is not None and now is not None:
        if now - issued_at > policy.max_quote_age_ticks:
            return Verdict.reject("stale quote")
    return Verdict.accept()


@dataclass(frozen=True)
class ManifestEntry:
    component_name: str
    version: str
    svn: int
    digest: bytes

    def encode(self) -> bytes:
        return encode(self.component_name, self.version, self.svn, self.digest)

    @classmethod
    def decode(cls, blob: bytes) -> "ManifestEntry":
        name, version, svn, digest = decode(blob, 4)
        return cls(decode_str(name), decode_str(version), decode_int(svn), decode_fixed(digest, 32))


@dataclass(frozen=True)
class Manifest:
    node_id: bytes
    entries: tuple[ManifestEntry, ...]
    signature: bytes = b""

    def signed_payload(self) -> bytes:
        return crypto.tagged(
            crypto.TAG_MANIFEST, encode(self.node_id, [e.encode() for e in self.entries])
        )

    def to_bytes(self) -> bytes:
        return encode(self.node_id, [e.encode() for e in self.entries], self.signature)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Manifest":
        node_id, entries, sig = decode(blob, 3)
        return cls(
            decode_fixed(node_id, 32),
            tuple(ManifestEntry.decode(e) for e in decode(entries)),
            decode_fixed(sig, 64),
        )

    def get(self, name: str) -> ManifestEntry | None:
        for e in self.entries:
            if e.component_name == name:
                return e
        return None


def manifest_entries_from_chain(identity: DeviceIdentity) -> list[ManifestEntry]:
    return [
        ManifestEntry(m.product_id or f"layer{m.layer_index}", str(m.svn), m.svn, m.code_digest)
        for m in identity.chain
    ]


def create_manifest(identity: DeviceIdentity, components: Iterable[ManifestEntry]) -> Manifest:
    entries = tuple(sorted(components, key=lambda e: e.component_name))
    if not entries:
        raise ContractViolation("manifest needs at least one component")
    key = _signing_key(identity)
    unsigned = Manifest(key.public_key, entries)
    return Manifest(unsigned.node_id, entries, key.sign(unsigned.signed_payload()))


def verify_manifest(manifest: Manifest, signer_key: bytes) -> Verdict:
    if manifest.node_id != signer_key:
        return Verdict.reject("unexpected signer")
    names = [e.component_name for e in manifest.entries]
    if not names or any(a >= b for a, b in zip(names, names[1:])):
        return Verdict.reject("non-canonical")
    if not crypto.verify(signer_key, manifest.signed_payload(), manifest.signature):
        return Verdict.reject("bad signature")
    return Verdict.accept()


@dataclass(frozen=True)
class Requirement:
    component_name: str
    min_svn: int = 0
    digest: bytes | None = None


@dataclass(frozen=True)
class DtcbPolicy:
    required_components: tuple[Requirement, ...]
    max_quote_age_ticks: int
    group_authority_key: bytes

    def __post_init__(self):
        if not self.required_components:
            raise ContractViolation("policy needs at least one required component")


def evaluate_policy(manifest: Manifest, policy: DtcbPolicy) -> Verdict:
    reasons = []
    for req in policy.required_components:
        entry = manifest.get(req.component_name)
        if entry is None:
            reasons.append(f"missing component {req.component_name}")
            continue
        if entry.svn < req.min_svn:
            reasons.append(f"svn regression component {req.component_name}")
        if req.digest is not None and entry.digest != req.digest:
            reasons.append(f"digest mismatch component {req.component_name}")
    return Verdict.reject(*reasons) if reasons else Verdict.accept()


@dataclass(frozen=True)
class MembershipCredential:
    member_pseudonym: bytes
    group_id: str
    authority_signature: bytes = field(default=b"", repr=False)

    def signed_payload(self) -> bytes:
        return crypto.tagged(crypto.TAG_MEMBERSHIP, encode(self.member_pseudonym, self.group_id))

    def to_bytes(self) -> bytes:
        return encode(self.member_pseudonym, self.group_id, self.authority_signature)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MembershipCredential":
        pseudonym, group_id, sig = decode(blob, 3)
        return cls(decode_fixed(pseudonym, 32), decode_str(group_id), decode_fixed(sig, 64))


def issue_membership(
    authority_secret: bytes,
    pseudonym_key: bytes,
    group_id: str,
    holder_device_id: bytes | None = None,
) -> MembershipCredential:
    if holder_device_id is not None and pseudonym_key == holder_device_id:
        raise ContractViolation("pseudonym must not be the holder's DeviceID key")
    unsigned = MembershipCredential(bytes(pseudonym_key), group_id)
    return MembershipCredential(
        unsigned.member_pseudonym,
        group_id,
        crypto.sign(authority_secret, unsigned.signed_payload()),
    )


def verify_membership(cred: MembershipCredential, authority_public: bytes) -> bool:
    return crypto.verify(authority_public, cred.signed_payload(), cred.authority_signature)


def _possession_payload(pseudonym: bytes, nonce: bytes) -> bytes:
    return crypto.tagged(crypto.TAG_MEMBERSHIP, encode(pseudonym, nonce))


def prove_possession(pseudonym: KeyPair, nonce: bytes) -> bytes:
    """Pseudonym signature over a peer challenge, so a credential cannot be replayed."""
    return pseudonym.sign(_possession_payload(pseudonym.public_key, nonce))


def verify_possession(cred: MembershipCredential, nonce: bytes, proof: bytes) -> bool:
    return crypto.verify(
        cred.member_pseudonym, _possession_payload(cred.member_pseudonym, nonce), proof
    )


@dataclass(frozen=True)
class GroupQuote:
    challenge: bytes
    member_quotes: tuple[Quote, ...]
    quorum_met: bool


def count_group_signers(
    challenge: bytes, quotes: Iterable[Quote], authorized_keys: Iterable[bytes] | None = None
) -> int:
    allowed = None if authorized_keys is None else set(authorized_keys)
    signers = set()
    for q in quotes:
        if allowed is not None and q.signer_public_key not in allowed:
            continue
        if verify_quote(q, q.signer_public_key, challenge):
            signers.add(q.signer_public_key)
    return len(signers)


def assess_group_quote(
    challenge: bytes,
    quotes: Sequence[Quote],
    quorum_m: int,
    authorized_keys: Iterable[bytes] | None = None,
) -> GroupQuote:
    if quorum_m < 1:
        raise ContractViolation("quorum_m must be >= 1")
    met = count_group_signers(challenge, quotes, authorized_keys) >= quorum_m
    return GroupQuote(bytes(challenge), tuple(quotes), met)


def group_quote(
    members: Sequence[tuple[DeviceIdentity, Registers]],
    challenge: bytes,
    quorum_m: int,
    authorized_keys: Iterable[bytes] | None = None,
) -> GroupQuote:
    quotes = [create_quote(identity, regs, challenge) for identity, regs in members]
    return assess_group_quote(challenge, quotes, quorum_m, authorized_keys)
