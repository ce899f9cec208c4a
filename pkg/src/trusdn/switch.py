"""Enclave-resident software switch.

The :class:`SwitchNode` object is the untrusted host shell that owns the
network attachment; everything it keeps secret (K_alpha, the K_beta epochs,
the FIB and packet buffers) lives in the enclave state reached through
``platform.enter``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Optional

from . import crypto, wire
from .crypto import Ciphertext, KeyRole, SymmetricKey
from .enclave import Platform
from .messages import EnrollmentMessage, open_enrollment_message
from .errors import BufferOverflow, CryptoError, NotEstablished, UnknownPeer, WireFormatError
from .flows import TO_CONTROLLER, ActionKind, FlowKey, FlowRule, Packet, RuleAction, decode_rules
from .sim import Envelope, Network, Segment
from .wire import MsgType

log = logging.getLogger(__name__)

BUFFER_LIMIT = 64
MISS_TIMEOUT = 128
GRACE_EPOCHS = 1

PACKET_IN_AAD = b"packet-in"
RULE_INSTALL_AAD = b"rule-install"
DOMAIN_KEY_AAD = b"domain-key"


def switch_node_name(switch_id: str) -> str:
    return f"sw:{switch_id}"


def ct_node_name(ct_id: str) -> str:
    return f"ct:{ct_id}"


class Fib:
    """Match-action table.  Lookup: highest priority wins, then newest.

    Exact rules are indexed by flow key; only wildcard rules are scanned.
    """

    def __init__(self):
        self._rules: dict[str, tuple[int, FlowRule]] = {}
        self._exact: dict[FlowKey, str] = {}
        self._wild: set[str] = set()
        self._seq = 0

    @staticmethod
    def _key(match) -> FlowKey:
        return FlowKey(match.src, match.dst, match.src_port, match.dst_port, match.proto)

    def _remove(self, rid: str) -> None:
        entry = self._rules.pop(rid, None)
        if entry is None:
            return
        rule = entry[1]
        if rule.match.is_exact:
            self._exact.pop(self._key(rule.match), None)
        else:
            self._wild.discard(rid)

    def insert(self, rule: FlowRule) -> None:
        # replacing by id, and at most one exact rule per flow key
        self._remove(rule.id)
        if rule.match.is_exact:
            key = self._key(rule.match)
            if key in self._exact:
                self._remove(self._exact[key])
            self._exact[key] = rule.id
        else:
            self._wild.add(rule.id)
        self._seq += 1
        self._rules[rule.id] = (self._seq, rule)

    def lookup(self, flow: FlowKey) -> RuleAction:
        best = None
        candidates = [self._exact[flow]] if flow in self._exact else []
        candidates.extend(self._wild)
        for rid in candidates:
            seq, rule = self._rules[rid]
            if rule.match.matches(flow):
                key = (rule.priority, seq)
                if best is None or key > best[0]:
                    best = (key, rule)
        return TO_CONTROLLER if best is None else best[1].action

    def rules(self) -> list[FlowRule]:
        ordered = sorted(self._rules.values(), key=lambda sr: (-sr[1].priority, -sr[0]))
        return [r for _, r in ordered]

    def flush(self) -> None:
        self._rules.clear()
        self._exact.clear()
        self._wild.clear()

    def __len__(self):
        return len(self._rules)


def beta_aad(src: str, dst: str, epoch: int) -> bytes:
    return wire.pack_fields(src.encode(), dst.encode(), wire.u64(epoch))


@dataclass(frozen=True)
class BetaFrame:
    src_switch: str
    dst_switch: str
    epoch: int
    body: Ciphertext

    def aad(self) -> bytes:
        return beta_aad(self.src_switch, self.dst_switch, self.epoch)

    def encode(self) -> bytes:
        return wire.encode(
            MsgType.BETA_FRAME,
            self.src_switch.encode(),
            self.dst_switch.encode(),
            wire.u64(self.epoch),
            self.body.to_bytes(),
        )

    @classmethod
    def decode(cls, data: bytes) -> "BetaFrame":
        _, (src, dst, epoch, body) = wire.decode(data, MsgType.BETA_FRAME, 4)
        return cls(src.decode(), dst.decode(), wire.read_u64(epoch), Ciphertext.from_bytes(body))


def encode_domain_update(epoch: int, k_beta: SymmetricKey, members) -> bytes:
    return wire.pack_fields(wire.u64(epoch), k_beta.bytes, *(m.encode() for m in members))


class SwitchNode:
    def __init__(self, net: Network, platform: Platform, enclave_id: str, switch_id: str, nc_name: str = "nc"):
        self.net = net
        self.platform = platform
        self.enclave_id = enclave_id
        self.id = switch_id
        self.name = switch_node_name(switch_id)
        self.nc_name = nc_name
        self.counters: Counter = Counter()
        self._miss_generation = 0
        st = self._state()
        st.setdefault("fib", Fib())
        st.setdefault("buffers", {})
        st.setdefault("pending", {})
        st.setdefault("beta_keys", {})
        st.setdefault("members", [])
        net.register(self.name, self.receive)

    def __repr__(self):
        return f"SwitchNode({self.id} on {self.platform.id})"

    def _state(self) -> dict:
        return self.platform.enter(self.enclave_id).state

    def enclave_state(self) -> dict:
        """Test hook: enclave introspection, unavailable to the host model."""
        return self._state()

    def _alarm(self, kind: str, detail: str = "") -> None:
        self.counters[f"alarm.{kind}"] += 1
        self.net.record(self.name, kind, detail)
        log.info("%s alarm %s %s", self.name, kind, detail)

    @property
    def enrolled(self) -> bool:
        return "k_alpha" in self._state()

    @property
    def epoch(self) -> Optional[int]:
        return self._state().get("epoch")

    # -- enrollment and domain keys -----------------------------------------

    def accept_enrollment(self, data: bytes) -> None:
        ctx = self.platform.enter(self.enclave_id)
        keys = open_enrollment_message(ctx.keypair.secret, EnrollmentMessage.decode(data))
        ctx.state["k_alpha"] = keys.k_alpha
        if keys.k_beta is not None:
            ctx.state["beta_keys"] = {keys.epoch: keys.k_beta}
            ctx.state["epoch"] = keys.epoch

    def update_domain(self, sealed: Ciphertext) -> bool:
        st = self._state()
        try:
            plain = crypto.sym_open(st["k_alpha"], sealed, aad=DOMAIN_KEY_AAD + self.id.encode())
            fields = wire.unpack_fields(plain)
            epoch, key, members = wire.read_u64(fields[0]), fields[1], [m.decode() for m in fields[2:]]
            k_beta = SymmetricKey(key, KeyRole.DOMAIN_BETA)
        except (CryptoError, WireFormatError, KeyError, IndexError, ValueError) as exc:
            self._alarm("domain_update_rejected", str(exc))
            return False
        current = st.get("epoch")
        if current is not None and epoch < current:
            self._alarm("domain_update_stale", f"epoch {epoch} < {current}")
            return False
        if current is not None and epoch == current and not crypto.ct_equal(st["beta_keys"][current].bytes, key):
            self._alarm("domain_update_conflict", f"epoch {epoch}")
            return False
        keys = dict(st["beta_keys"])
        # keep the existing key object: its nonce counters must not reset
        keys.setdefault(epoch, k_beta)
        st["beta_keys"] = {e: k for e, k in keys.items() if e >= epoch - GRACE_EPOCHS}
        st["epoch"] = epoch
        st["members"] = members
        self.counters["domain_updates"] += 1
        return True

    # -- message dispatch ----------------------------------------------------

    def receive(self, env: Envelope) -> None:
        try:
            tag, payload = wire.unframe(env.data)
            if tag is MsgType.DATA:
                self.switch_ingress(Packet.decode(payload))
            elif tag is MsgType.BETA_FRAME:
                self.accept_beta(BetaFrame.decode(env.data))
            elif tag is MsgType.RULE_INSTALL:
                target, sealed = wire.unpack_fields(payload, 2)
                if target.decode() != self.id:
                    self._alarm("misaddressed_rule", target.decode(errors="replace"))
                    return
                self.install_rule(Ciphertext.from_bytes(sealed))
            elif tag is MsgType.DOMAIN_KEY:
                target, sealed = wire.unpack_fields(payload, 2)
                if target.decode() == self.id:
                    self.update_domain(Ciphertext.from_bytes(sealed))
            else:
                self._alarm("unexpected_message", tag.name)
        except BufferOverflow as exc:
            self.counters["buffer_overflow"] += 1
            log.debug("%s: %s", self.name, exc)
        except NotEstablished as exc:
            self._alarm("not_enrolled", str(exc))
        except (WireFormatError, CryptoError, ValueError, UnicodeDecodeError) as exc:
            self._alarm("malformed", str(exc))

    # -- forwarding ------------------------------------------------------------

    def switch_ingress(self, pkt: Packet) -> str:
        """Process one packet; returns the name of the effect taken."""
        st = self._state()
        if "k_alpha" not in st:
            raise NotEstablished(f"switch {self.id} is not enrolled")
        action = st["fib"].lookup(pkt.flow)
        if action.kind is not ActionKind.SEND_TO_CONTROLLER:
            return self._execute(action, pkt)
        buffers = st["buffers"]
        queue = buffers.setdefault(pkt.flow, [])
        if len(queue) >= BUFFER_LIMIT:
            self.counters["dropped"] += 1
            raise BufferOverflow(f"{self.id}: more than {BUFFER_LIMIT} packets buffered for {pkt.flow}")
        queue.append(pkt)
        self.counters["buffered"] += 1
        if pkt.flow in st["pending"]:
            return "buffered"
        self._miss_generation += 1
        gen = self._miss_generation
        st["pending"][pkt.flow] = gen
        sealed = crypto.sym_seal(st["k_alpha"], pkt.encode(), aad=PACKET_IN_AAD + self.id.encode(), sender=self.id.encode())
        self.net.send(self.name, self.nc_name, Segment.ALPHA, wire.encode(MsgType.PACKET_IN, self.id.encode(), sealed.to_bytes()))
        self.counters["packet_in"] += 1
        self.net.schedule(MISS_TIMEOUT, lambda: self._miss_timeout(pkt.flow, gen))
        return "packet_in"

    def _miss_timeout(self, flow: FlowKey, gen: int) -> None:
        st = self._state()
        if st["pending"].get(flow) != gen:
            return
        del st["pending"][flow]
        dropped = st["buffers"].pop(flow, [])
        self.counters["miss_timeout_drops"] += len(dropped)
        self.net.record(self.name, "miss_timeout", str(flow))

    def _execute(self, action: RuleAction, pkt: Packet) -> str:
        if action.kind is ActionKind.FORWARD_LOCAL:
            self.net.send(self.name, ct_node_name(action.target), Segment.GAMMA, wire.frame(MsgType.DATA, pkt.encode()))
            self.counters["forwarded_local"] += 1
            return "forward_local"
        if action.kind is ActionKind.FORWARD_TUNNEL:
            try:
                frame = self.emit_beta(pkt, action.target)
            except UnknownPeer as exc:
                self._alarm("unknown_peer", str(exc))
                self.counters["dropped"] += 1
                return "drop"
            self.net.send(self.name, switch_node_name(action.target), Segment.BETA, frame.encode())
            self.counters["forwarded_tunnel"] += 1
            return "forward_tunnel"
        self.counters["dropped"] += 1
        return "drop"

    def install_rule(self, sealed: Ciphertext) -> bool:
        """Open an NC rule-install message and apply it.  Returns the ack."""
        st = self._state()
        try:
            plain = crypto.sym_open(st["k_alpha"], sealed, aad=RULE_INSTALL_AAD + self.id.encode())
            rules = decode_rules(plain)
        except (CryptoError, WireFormatError, KeyError, ValueError) as exc:
            self._alarm("forged_rule", str(exc))
            return False
        fib: Fib = st["fib"]
        for rule in rules:
            fib.insert(rule)
        self.counters["rules_installed"] += len(rules)
        for flow in list(st["buffers"]):
            action = fib.lookup(flow)
            if action.kind is ActionKind.SEND_TO_CONTROLLER:
                continue
            st["pending"].pop(flow, None)
            for pkt in sorted(st["buffers"].pop(flow), key=lambda p: p.seq):
                self._execute(action, pkt)
        return True

    def flush_rules(self) -> None:
        """Delete every installed rule (the benchmark's per-flow reset)."""
        self._state()["fib"].flush()

    # -- beta tunnel -----------------------------------------------------------

    def emit_beta(self, pkt: Packet, peer: str) -> BetaFrame:
        st = self._state()
        if peer == self.id or peer not in st["members"]:
            raise UnknownPeer(f"{peer} is not in the domain of {self.id}")
        epoch = st["epoch"]
        aad = beta_aad(self.id, peer, epoch)
        body = crypto.sym_seal(st["beta_keys"][epoch], pkt.encode(), aad=aad, sender=self.id.encode())
        return BetaFrame(self.id, peer, epoch, body)

    def accept_beta(self, frame: BetaFrame) -> str:
        st = self._state()
        key = st["beta_keys"].get(frame.epoch)
        if key is None:
            self._alarm("beta_auth_failure", f"no key for epoch {frame.epoch}")
            return "drop"
        try:
            pkt = Packet.decode(crypto.sym_open(key, frame.body, aad=frame.aad()))
        except (CryptoError, WireFormatError, ValueError) as exc:
            self._alarm("beta_auth_failure", str(exc))
            return "drop"
        if frame.dst_switch != self.id:
            self._alarm("beta_misdirected", frame.dst_switch)
            return "drop"
        self.counters["beta_accepted"] += 1
        return self.switch_ingress(pkt)

    def metrics(self) -> dict[str, int]:
        st = self._state()
        snap = dict(self.counters)
        snap["fib_rules"] = len(st["fib"])
        snap["buffered_now"] = sum(len(q) for q in st["buffers"].values())
        return dict(sorted(snap.items()))
