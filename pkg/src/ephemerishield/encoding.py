"""Canonical binary encoding used for hashing, signing and on-disk storage.

Every value is one tag byte followed by its payload; all integers in
headers are unsigned big-endian.

====  ==========  ==========================================================
tag   type        payload
====  ==========  ==========================================================
0x00  None        (empty)
0x01  False       (empty)
0x02  True        (empty)
0x03  int         u8 length L, then L bytes two's complement, minimal length
                  (zero is L = 0)
0x04  float       8 bytes IEEE-754 binary64; NaN is not encodable
0x05  bytes       u32 length, raw bytes
0x06  str         u32 length, UTF-8 bytes
0x07  sequence    u32 count, then each element
0x08  record      u16 name length, ASCII name, u16 field count, then each
                  field value in declaration order
0x09  enum        u16 name length, ASCII name, u16 value length, UTF-8 value
====  ==========  ==========================================================

Decoding is strict: trailing bytes, non-minimal integers, unknown record
names and wrong field counts are all rejected, so each value has exactly
one encoding.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import math
import struct
from typing import Any

_RECORDS: dict[str, type] = {}
_RECORD_NAMES: dict[type, str] = {}
_ENUMS: dict[str, type] = {}
_ENUM_NAMES: dict[type, str] = {}

MAX_DEPTH = 64


class EncodingError(ValueError):
    pass


def register(name: str):
    """Class decorator registering a dataclass (or Enum) under a wire name."""

    def deco(cls):
        if issubclass(cls, enum.Enum):
            _ENUMS[name] = cls
            _ENUM_NAMES[cls] = name
        else:
            if not dataclasses.is_dataclass(cls):
                raise TypeError(f"{cls!r} is not a dataclass")
            _RECORDS[name] = cls
            _RECORD_NAMES[cls] = name
        return cls

    return deco


def register_type(cls: type, name: str) -> None:
    register(name)(cls)


def encode(value: Any) -> bytes:
    out = bytearray()
    _encode(value, out, 0)
    return bytes(out)


def digest(value: Any) -> bytes:
    return hashlib.sha256(encode(value)).digest()


def _name_bytes(name: str) -> bytes:
    raw = name.encode("ascii")
    return struct.pack(">H", len(raw)) + raw


def _encode(value: Any, out: bytearray, depth: int) -> None:
    if depth > MAX_DEPTH:
        raise EncodingError("value nested too deeply")
    if value is None:
        out.append(0x00)
    elif value is False:
        out.append(0x01)
    elif value is True:
        out.append(0x02)
    elif isinstance(value, enum.Enum):
        name = _ENUM_NAMES.get(type(value))
        if name is None:
            raise EncodingError(f"unregistered enum {type(value).__name__}")
        raw = str(value.value).encode("utf-8")
        out.append(0x09)
        out += _name_bytes(name)
        out += struct.pack(">H", len(raw)) + raw
    elif isinstance(value, int):
        length = (value.bit_length() + 8) // 8 if value else 0
        if length > 255:
            raise EncodingError("integer too large")
        out.append(0x03)
        out.append(length)
        out += value.to_bytes(length, "big", signed=True)
    elif isinstance(value, float):
        if math.isnan(value):
            raise EncodingError("NaN is not encodable")
        out.append(0x04)
        out += struct.pack(">d", value)
    elif isinstance(value, (bytes, bytearray)):
        out.append(0x05)
        out += struct.pack(">I", len(value))
        out += value
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(0x06)
        out += struct.pack(">I", len(raw))
        out += raw
    elif isinstance(value, (list, tuple)):
        out.append(0x07)
        out += struct.pack(">I", len(value))
        for item in value:
            _encode(item, out, depth + 1)
    elif dataclasses.is_dataclass(value) and not isinstance(value, type):
        name = _RECORD_NAMES.get(type(value))
        if name is None:
            raise EncodingError(f"unregistered record {type(value).__name__}")
        fields = dataclasses.fields(value)
        out.append(0x08)
        out += _name_bytes(name)
        out += struct.pack(">H", len(fields))
        for f in fields:
            _encode(getattr(value, f.name), out, depth + 1)
    else:
        raise EncodingError(f"cannot encode {type(value).__name__}")


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise EncodingError("truncated input")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def name(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("ascii")
        except UnicodeDecodeError as exc:
            raise EncodingError("non-ASCII type name") from exc


def decode(data: bytes) -> Any:
    reader = _Reader(bytes(data))
    value = _decode(reader, 0)
    if reader.pos != len(reader.buf):
        raise EncodingError(f"{len(reader.buf) - reader.pos} trailing bytes")
    return value


def _decode(r: _Reader, depth: int) -> Any:
    if depth > MAX_DEPTH:
        raise EncodingError("value nested too deeply")
    tag = r.u8()
    if tag == 0x00:
        return None
    if tag == 0x01:
        return False
    if tag == 0x02:
        return True
    if tag == 0x03:
        length = r.u8()
        raw = r.take(length)
        value = int.from_bytes(raw, "big", signed=True)
        expected = (value.bit_length() + 8) // 8 if value else 0
        if expected != length:
            raise EncodingError("non-minimal integer encoding")
        return value
    if tag == 0x04:
        value = struct.unpack(">d", r.take(8))[0]
        if math.isnan(value):
            raise EncodingError("NaN is not allowed")
        return value
    if tag == 0x05:
        return r.take(r.u32())
    if tag == 0x06:
        raw = r.take(r.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingError("invalid UTF-8 string") from exc
    if tag == 0x07:
        count = r.u32()
        if count > len(r.buf) - r.pos:
            raise EncodingError("sequence longer than input")
        return tuple(_decode(r, depth + 1) for _ in range(count))
    if tag == 0x08:
        name = r.name()
        cls = _RECORDS.get(name)
        if cls is None:
            raise EncodingError(f"unknown record type {name!r}")
        count = r.u16()
        fields = dataclasses.fields(cls)
        if count != len(fields):
            raise EncodingError(f"record {name} expects {len(fields)} fields, got {count}")
        values = [_decode(r, depth + 1) for _ in range(count)]
        try:
            return cls(*values)
        except (TypeError, ValueError) as exc:
            raise EncodingError(f"invalid {name} record: {exc}") from exc
    if tag == 0x09:
        name = r.name()
        cls = _ENUMS.get(name)
        if cls is None:
            raise EncodingError(f"unknown enum type {name!r}")
        raw = r.take(r.u16())
        try:
            return cls(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise EncodingError(f"invalid {name} value") from exc
    raise EncodingError(f"unknown tag 0x{tag:02x}")
