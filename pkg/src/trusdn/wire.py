"""Canonical binary framing for every message the simulator carries.

A frame is ``type tag (1 byte) || payload length (4 bytes, big endian) ||
payload``.  Payloads made of several fields use :func:`pack_fields`, which
prefixes each field with its own 4-byte length.
"""

from __future__ import annotations

import enum
import struct

from .errors import WireFormatError

_HEADER = struct.Struct(">BI")


class MsgType(enum.IntEnum):
    # attestation and enrollment
    CHALLENGE = 0x01
    QUOTE = 0x02
    ENROLLMENT = 0x03
    # controller <-> switch / compute task
    PACKET_IN = 0x10
    RULE_INSTALL = 0x11
    PSK_GRANT = 0x12
    DOMAIN_KEY = 0x13
    # data plane
    DATA = 0x20
    BETA_FRAME = 0x21
    # endpoint payloads carried inside DATA packets
    HELLO = 0x30
    SERVER_HELLO = 0x31
    CLIENT_FINISHED = 0x32
    RECORD = 0x33
    BL_HELLO = 0x34
    BL_SERVER = 0x35
    BL_CLIENT_FINISHED = 0x36
    BL_SERVER_FINISHED = 0x37


def frame(tag: MsgType, payload: bytes) -> bytes:
    return _HEADER.pack(int(tag), len(payload)) + payload


def unframe(data: bytes) -> tuple[MsgType, bytes]:
    if len(data) < _HEADER.size:
        raise WireFormatError("truncated frame header")
    tag, length = _HEADER.unpack_from(data)
    if len(data) != _HEADER.size + length:
        raise WireFormatError("frame length mismatch")
    try:
        return MsgType(tag), data[_HEADER.size :]
    except ValueError:
        raise WireFormatError(f"unknown message type 0x{tag:02x}") from None


def peek_type(data: bytes):
    """Type tag of a frame, or None if it does not parse (used by filters)."""
    try:
        return unframe(data)[0]
    except WireFormatError:
        return None


def pack_fields(*fields: bytes) -> bytes:
    out = bytearray()
    for f in fields:
        out += len(f).to_bytes(4, "big")
        out += f
    return bytes(out)


def unpack_fields(data: bytes, count: int | None = None) -> list[bytes]:
    fields, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise WireFormatError("truncated field length")
        n = int.from_bytes(data[pos : pos + 4], "big")
        pos += 4
        if pos + n > len(data):
            raise WireFormatError("truncated field")
        fields.append(data[pos : pos + n])
        pos += n
    if count is not None and len(fields) != count:
        raise WireFormatError(f"expected {count} fields, got {len(fields)}")
    return fields


def encode(tag: MsgType, *fields: bytes) -> bytes:
    return frame(tag, pack_fields(*fields))


def decode(data: bytes, expect: MsgType | None = None, count: int | None = None):
    tag, payload = unframe(data)
    if expect is not None and tag != expect:
        raise WireFormatError(f"expected {expect.name}, got {tag.name}")
    return tag, unpack_fields(payload, count)


def u64(n: int) -> bytes:
    return n.to_bytes(8, "big")


def read_u64(b: bytes) -> int:
    if len(b) != 8:
        raise WireFormatError("expected 8-byte integer")
    return int.from_bytes(b, "big")
