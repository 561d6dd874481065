"""Canonical serialization shared by every hashed, signed or transmitted structure.

Each field is a 4-byte big-endian length followed by its raw bytes. Integers
are 8-byte big-endian, strings UTF-8. A list field is itself a blob holding
the concatenation of its encoded items, so nesting stays self-delimiting.
"""

from __future__ import annotations

import struct
from typing import Sequence, Union

Field = Union[bytes, bytearray, str, int, Sequence["Field"]]

_LEN = struct.Struct(">I")
_INT = struct.Struct(">Q")


class DecodeError(ValueError):
    pass


def encode_int(value: int) -> bytes:
    if value < 0 or value >= 1 << 64:
        raise ValueError(f"integer out of range: {value}")
    return _INT.pack(value)


def _raw(value: Field) -> bytes:
    if isinstance(value, bool):
        return encode_int(int(value))
    if isinstance(value, int):
        return encode_int(value)
    if isinstance(value, str):
        return value.encode("utf-8")
    if isinstance(value, (bytes, bytearray)):
        return bytes(value)
    if isinstance(value, (list, tuple)):
        return encode(*value)
    raise TypeError(f"cannot encode {type(value).__name__}")


def encode(*fields: Field) -> bytes:
    out = bytearray()
    for value in fields:
        raw = _raw(value)
        out += _LEN.pack(len(raw))
        out += raw
    return bytes(out)


def decode(blob: bytes, count: int | None = None) -> list[bytes]:
    """Split a blob into raw fields; trailing or truncated bytes are errors."""
    fields = []
    pos = 0
    blob = bytes(blob)
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise DecodeError("truncated length prefix")
        (n,) = _LEN.unpack_from(blob, pos)
        pos += 4
        if pos + n > len(blob):
            raise DecodeError("truncated field")
        fields.append(blob[pos : pos + n])
        pos += n
    if count is not None and len(fields) != count:
        raise DecodeError(f"expected {count} fields, found {len(fields)}")
    return fields


def decode_int(raw: bytes) -> int:
    if len(raw) != 8:
        raise DecodeError("integer field must be 8 bytes")
    return _INT.unpack(raw)[0]


def decode_str(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError("invalid utf-8") from exc


def decode_fixed(raw: bytes, size: int) -> bytes:
    if len(raw) != size:
        raise DecodeError(f"expected {size}-byte field, got {len(raw)}")
    return raw


def decode_list(raw: bytes) -> list[bytes]:
    return decode(raw)

