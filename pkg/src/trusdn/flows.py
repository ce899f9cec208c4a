"""Flow identifiers, match-action rules and data packets."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from .errors import WireFormatError
from .wire import pack_fields, read_u64, u64, unpack_fields

MAX_PAYLOAD = 9 * 1024


@dataclass(frozen=True, order=True)
class FlowKey:
    src: str
    dst: str
    src_port: int
    dst_port: int
    proto: int = 6

    def __post_init__(self):
        if not (0 <= self.src_port < 2**16 and 0 <= self.dst_port < 2**16):
            raise ValueError("ports are 16-bit")
        if not 0 <= self.proto < 2**8:
            raise ValueError("proto is 8-bit")

    def reversed(self) -> "FlowKey":
        return FlowKey(self.dst, self.src, self.dst_port, self.src_port, self.proto)

    def canonical(self) -> "FlowKey":
        """Direction-independent representative: both directions of one
        conversation map to the same key."""
        if (self.src, self.src_port) <= (self.dst, self.dst_port):
            return self
        return self.reversed()

    def encode(self) -> bytes:
        return pack_fields(
            self.src.encode(),
            self.dst.encode(),
            self.src_port.to_bytes(2, "big"),
            self.dst_port.to_bytes(2, "big"),
            bytes([self.proto]),
        )

    @classmethod
    def decode(cls, data: bytes) -> "FlowKey":
        src, dst, sp, dp, proto = unpack_fields(data, 5)
        if len(sp) != 2 or len(dp) != 2 or len(proto) != 1:
            raise WireFormatError("malformed flow key")
        return cls(src.decode(), dst.decode(), int.from_bytes(sp, "big"), int.from_bytes(dp, "big"), proto[0])


@dataclass(frozen=True)
class FlowMatch:
    """A FlowKey pattern; ``None`` fields are wildcards."""

    src: Optional[str] = None
    dst: Optional[str] = None
    src_port: Optional[int] = None
    dst_port: Optional[int] = None
    proto: Optional[int] = None

    @classmethod
    def exact(cls, flow: FlowKey) -> "FlowMatch":
        return cls(flow.src, flow.dst, flow.src_port, flow.dst_port, flow.proto)

    @property
    def is_exact(self) -> bool:
        return None not in (self.src, self.dst, self.src_port, self.dst_port, self.proto)

    def matches(self, flow: FlowKey) -> bool:
        return all(
            want is None or want == got
            for want, got in (
                (self.src, flow.src),
                (self.dst, flow.dst),
                (self.src_port, flow.src_port),
                (self.dst_port, flow.dst_port),
                (self.proto, flow.proto),
            )
        )

    def encode(self) -> bytes:
        def opt(v, width=None):
            if v is None:
                return b""
            if isinstance(v, str):
                return b"\x01" + v.encode()
            return b"\x01" + v.to_bytes(width, "big")

        return pack_fields(
            opt(self.src), opt(self.dst), opt(self.src_port, 2), opt(self.dst_port, 2), opt(self.proto, 1)
        )

    @classmethod
    def decode(cls, data: bytes) -> "FlowMatch":
        src, dst, sp, dp, proto = unpack_fields(data, 5)

        def num(b):
            return int.from_bytes(b[1:], "big") if b else None

        def text(b):
            return b[1:].decode() if b else None

        return cls(text(src), text(dst), num(sp), num(dp), num(proto))


class ActionKind(enum.IntEnum):
    FORWARD_LOCAL = 1
    FORWARD_TUNNEL = 2
    DROP = 3
    SEND_TO_CONTROLLER = 4


@dataclass(frozen=True)
class RuleAction:
    kind: ActionKind
    target: str = ""  # CT id for FORWARD_LOCAL, peer switch id for FORWARD_TUNNEL

    @classmethod
    def forward_local(cls, port: str) -> "RuleAction":
        return cls(ActionKind.FORWARD_LOCAL, port)

    @classmethod
    def forward_tunnel(cls, peer: str) -> "RuleAction":
        return cls(ActionKind.FORWARD_TUNNEL, peer)


DROP = RuleAction(ActionKind.DROP)
TO_CONTROLLER = RuleAction(ActionKind.SEND_TO_CONTROLLER)


@dataclass(frozen=True)
class FlowRule:
    id: str
    match: FlowMatch
    action: RuleAction
    priority: int = 100

    def encode(self) -> bytes:
        return pack_fields(
            self.id.encode(),
            self.match.encode(),
            bytes([self.action.kind]) + self.action.target.encode(),
            self.priority.to_bytes(4, "big", signed=True),
        )

    @classmethod
    def decode(cls, data: bytes) -> "FlowRule":
        rid, match, action, prio = unpack_fields(data, 4)
        if not action or len(prio) != 4:
            raise WireFormatError("malformed rule")
        try:
            kind = ActionKind(action[0])
        except ValueError:
            raise WireFormatError("unknown rule action") from None
        return cls(
            rid.decode(),
            FlowMatch.decode(match),
            RuleAction(kind, action[1:].decode()),
            int.from_bytes(prio, "big", signed=True),
        )


def encode_rules(rules) -> bytes:
    return pack_fields(*(r.encode() for r in rules))


def decode_rules(data: bytes) -> list[FlowRule]:
    return [FlowRule.decode(f) for f in unpack_fields(data)]


@dataclass(frozen=True)
class Packet:
    flow: FlowKey
    payload: bytes
    seq: int = 0

    def __post_init__(self):
        if len(self.payload) > MAX_PAYLOAD:
            raise ValueError(f"payload exceeds {MAX_PAYLOAD} bytes")

    def encode(self) -> bytes:
        return pack_fields(self.flow.encode(), u64(self.seq), self.payload)

    @classmethod
    def decode(cls, data: bytes) -> "Packet":
        flow, seq, payload = unpack_fields(data, 3)
        return cls(FlowKey.decode(flow), payload, read_u64(seq))
