"""Layered device identity: UDS -> CDI -> DeviceID, then per-layer secrets -> AliasIDs.

Layer 0 is measured by its first mutable code digest; the CDI keys the whole
chain. Every later layer's secret is a keyed hash of its measurement under the
previous layer's secret, so a layer identity depends on the device secret, its
own code and every layer below it, in order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from . import crypto
from .crypto import ContractViolation, KeyPair
from .encoding import decode, decode_fixed, decode_int, decode_str, encode
from .verdict import Verdict

MAX_LAYERS = 16


class ChainStructureError(ContractViolation):
    pass


@dataclass(frozen=True)
class LayerMeasurement:
    layer_index: int
    code_digest: bytes
    product_id: str = ""
    svn: int = 0

    def __post_init__(self):
        if self.layer_index < 0:
            raise ContractViolation("layer_index must be >= 0")
        if self.svn < 0:
            raise ContractViolation("svn must be >= 0")
        crypto._require_len("code_digest", self.code_digest, crypto.DIGEST_SIZE)

    def encode(self) -> bytes:
        return encode(self.layer_index, self.code_digest, self.product_id, self.svn)

    @classmethod
    def decode(cls, blob: bytes) -> "LayerMeasurement":
        idx, digest, pid, svn = decode(blob, 4)
        return cls(decode_int(idx), decode_fixed(digest, 32), decode_str(pid), decode_int(svn))


@dataclass(frozen=True)
class DeviceIdentity:
    uds: bytes = field(repr=False)
    cdi: bytes = field(repr=False)
    layer_secrets: tuple[bytes, ...] = field(repr=False)
    device_id: KeyPair
    alias_ids: tuple[KeyPair, ...]
    chain: tuple[LayerMeasurement, ...]

    @property
    def top_alias(self) -> KeyPair | None:
        return self.alias_ids[-1] if self.alias_ids else None

    def public_bytes(self) -> bytes:
        """Wire form: public keys and measurements only, never secrets."""
        return encode(
            self.device_id.public_key,
            [k.public_key for k in self.alias_ids],
            [m.encode() for m in self.chain],
        )

    def chain_digest(self) -> bytes:
        return crypto.hash(crypto.tagged(crypto.TAG_QUOTE, self.public_bytes()))


def derive_cdi(uds: bytes, fmc: bytes) -> bytes:
    crypto._require_len("fmc", fmc, crypto.DIGEST_SIZE)
    return crypto.keyed_owf(uds, crypto.tagged(crypto.TAG_CDI, fmc))


def derive_device_id(cdi: bytes) -> KeyPair:
    crypto._require_len("cdi", cdi, crypto.DIGEST_SIZE)
    return crypto.keypair_from_seed(crypto.hash(crypto.tagged(crypto.TAG_DEVICE_ID, cdi)))


def derive_layer_secret(
    prev_secret: bytes, measurement: LayerMeasurement, expected_index: int | None = None
) -> bytes:
    if expected_index is not None and measurement.layer_index != expected_index:
        raise ChainStructureError(
            f"chain gap: expected layer {expected_index}, got {measurement.layer_index}"
        )
    return crypto.keyed_owf(prev_secret, crypto.tagged(crypto.TAG_LAYER, measurement.encode()))


def derive_alias_id(layer_secret: bytes) -> KeyPair:
    crypto._require_len("layer_secret", layer_secret, crypto.DIGEST_SIZE)
    return crypto.keypair_from_seed(crypto.hash(crypto.tagged(crypto.TAG_ALIAS_ID, layer_secret)))


def validate_chain(measurements: Sequence[LayerMeasurement]) -> None:
    if not measurements:
        raise ChainStructureError("empty chain")
    if len(measurements) > MAX_LAYERS:
        raise ChainStructureError(f"chain depth {len(measurements)} exceeds {MAX_LAYERS}")
    seen = set()
    for expected, m in enumerate(measurements):
        if m.layer_index in seen:
            raise ChainStructureError(f"duplicate layer index {m.layer_index}")
        seen.add(m.layer_index)
        if m.layer_index != expected:
            raise ChainStructureError(
                f"chain gap: expected layer {expected}, got {m.layer_index}"
            )


def build_chain(uds: bytes, measurements: Sequence[LayerMeasurement]) -> DeviceIdentity:
    """Derive the full identity for a device booting ``measurements`` in order.

    The layer-0 secret binds the layer-0 product id and svn on top of the CDI;
    each AliasID for layer n >= 1 comes from that layer's secret.
    """
    measurements = tuple(measurements)
    validate_chain(measurements)
    cdi = derive_cdi(uds, measurements[0].code_digest)
    secrets = [derive_layer_secret(cdi, measurements[0], expected_index=0)]
    for m in measurements[1:]:
        secrets.append(derive_layer_secret(secrets[-1], m, expected_index=len(secrets)))
    return DeviceIdentity(
        uds=bytes(uds),
        cdi=cdi,
        layer_secrets=tuple(secrets),
        device_id=derive_device_id(cdi),
        alias_ids=tuple(derive_alias_id(s) for s in secrets[1:]),
        chain=measurements,
    )


class SvnRecord:
    """Highest accepted svn per (layer_index, product_id); never decreases."""

    def __init__(self, initial: dict[tuple[int, str], int] | None = None):
        self._highest: dict[tuple[int, str], int] = dict(initial or {})

    def get(self, layer_index: int, product_id: str) -> int | None:
        return self._highest.get((layer_index, product_id))

    def items(self):
        return self._highest.items()


def check_svn(record: SvnRecord, measurement: LayerMeasurement) -> Verdict:
    key = (measurement.layer_index, measurement.product_id)
    current = record._highest.get(key)
    if current is not None and measurement.svn < current:
        return Verdict.reject("svn regression")
    record._highest[key] = measurement.svn if current is None else max(current, measurement.svn)
    return Verdict.accept()
