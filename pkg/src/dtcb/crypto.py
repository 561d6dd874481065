"""Cryptographic substrate: hashing, keyed one-way function, seeded keys, signatures.

Algorithms are pinned for bit-exact reproduction: SHA-256, HMAC-SHA-256 and
Ed25519 (the 32-byte seed is the RFC 8032 private key).
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

DIGEST_SIZE = 32
SEED_SIZE = 32

# single-byte domain separation tags
TAG_LOG = 0x00
TAG_CDI = 0x01
TAG_LAYER = 0x02
TAG_DEVICE_ID = 0x03
TAG_ALIAS_ID = 0x04
TAG_QUOTE = 0x05
TAG_MANIFEST = 0x06
TAG_ASSERTION = 0x07
TAG_MASK = 0x08
TAG_MEMBERSHIP = 0x09


class ContractViolation(ValueError):
    """Raised when a caller passes values outside an operation's contract."""


def _require_len(name: str, value: bytes, size: int) -> None:
    if not isinstance(value, (bytes, bytearray)) or len(value) != size:
        got = len(value) if isinstance(value, (bytes, bytearray)) else type(value).__name__
        raise ContractViolation(f"{name} must be {size} bytes, got {got}")


def tagged(tag: int, payload: bytes) -> bytes:
    return bytes([tag]) + payload


def hash(data: bytes) -> bytes:  # noqa: A001 - mirrors the operation name
    return hashlib.sha256(data).digest()


def keyed_owf(key: bytes, data: bytes) -> bytes:
    _require_len("key", key, SEED_SIZE)
    return hmac.new(bytes(key), data, hashlib.sha256).digest()


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    secret_key: bytes = field(repr=False)

    def sign(self, message: bytes) -> bytes:
        return sign(self.secret_key, message)


def keypair_from_seed(seed: bytes) -> KeyPair:
    _require_len("seed", seed, SEED_SIZE)
    sk = Ed25519PrivateKey.from_private_bytes(bytes(seed))
    pk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return KeyPair(public_key=pk, secret_key=bytes(seed))


def sign(secret_key: bytes, message: bytes) -> bytes:
    _require_len("secret_key", secret_key, SEED_SIZE)
    return Ed25519PrivateKey.from_private_bytes(bytes(secret_key)).sign(message)


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """Malformed keys or signatures verify as False rather than raising."""
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public_key)).verify(bytes(signature), message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True
