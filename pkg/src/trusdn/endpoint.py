"""Compute tasks: flow-key grants, handshakes and protected records.

Two handshakes are implemented over the same record layer:

* PSK mode (three messages, no public-key operations)::

      C -> S  HELLO(cn)
      S -> C  SERVER_HELLO(sn, MAC(k, "server finished" || T))
      C -> S  CLIENT_FINISHED(MAC(k, "client finished" || T))

  with ``k = HKDF(psk, cn || sn || canonical flow)`` and ``T`` the transcript.

* baseline mode (four messages): ephemeral X25519 plus Ed25519 signatures
  under each side's CK, four public-key operations per side.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from . import crypto, wire
from .crypto import KeyRole, SymmetricKey
from .enclave import Platform
from .errors import (
    AuthenticationFailure,
    CryptoError,
    FinishedMismatch,
    NotEstablished,
    TrusdnError,
    UnknownPeer,
    WireFormatError,
)
from .flows import FlowKey, Packet
from .messages import EnrollmentMessage, PskGrant, open_enrollment_message, open_psk_grant
from .sim import Envelope, Network, Segment
from .switch import ct_node_name, switch_node_name
from .wire import MsgType

log = logging.getLogger(__name__)

GRANT_WAIT = 32
HANDSHAKE_TIMEOUT = 256
NONCE_LEN = 32
FIRST_EPHEMERAL_PORT = 49152

SERVER_LABEL = b"server finished"
CLIENT_LABEL = b"client finished"


class Mode(str, enum.Enum):
    PSK = "psk"
    BASELINE = "pk"


def derive_session_key(secret: bytes, client_nonce: bytes, server_nonce: bytes, flow: FlowKey) -> SymmetricKey:
    info = b"trusdn/session" + client_nonce + server_nonce + flow.canonical().encode()
    return SymmetricKey(crypto.hkdf(secret, info), KeyRole.DERIVED)


def psk_transcript(client_nonce: bytes, server_nonce: bytes, flow: FlowKey) -> bytes:
    return wire.pack_fields(client_nonce, server_nonce, flow.canonical().encode())


def baseline_transcript(cn: bytes, eph_c: bytes, sn: bytes, eph_s: bytes, flow: FlowKey) -> bytes:
    return wire.pack_fields(cn, eph_c, sn, eph_s, flow.canonical().encode())


def record_aad(sender: str, seq: int, flow: FlowKey) -> bytes:
    return wire.pack_fields(b"record", sender.encode(), wire.u64(seq), flow.canonical().encode())


@dataclass
class SessionState:
    flow: FlowKey  # client -> server direction
    role: str
    mode: Mode
    psk: Optional[SymmetricKey] = None
    client_nonce: bytes = b""
    server_nonce: bytes = b""
    session_key: Optional[SymmetricKey] = None
    established: bool = False
    failed: Optional[str] = None
    handshake_pk_ops: int = 0
    handshake_messages: int = 0
    send_seq: int = 0
    recv_seq: int = 0
    packet_seq: int = 0
    transcript: bytes = b""
    eph_secret: bytes = field(default=b"", repr=False)
    pending_out: list = field(default_factory=list, repr=False)
    waiting: list = field(default_factory=list, repr=False)
    received: list = field(default_factory=list, repr=False)

    @property
    def peer(self) -> str:
        return self.flow.dst if self.role == "client" else self.flow.src

    @property
    def out_flow(self) -> FlowKey:
        return self.flow if self.role == "client" else self.flow.reversed()


class ComputeTaskNode:
    def __init__(self, net: Network, platform: Platform, enclave_id: str, ct_id: str, switch_id: str, rng):
        self.net = net
        self.platform = platform
        self.enclave_id = enclave_id
        self.id = ct_id
        self.name = ct_node_name(ct_id)
        self.switch_id = switch_id
        self.rng = rng
        self.counters: Counter = Counter()
        # host-visible timing metadata for the benchmark
        self.flow_times: dict[FlowKey, dict[str, int]] = {}
        self._next_port = FIRST_EPHEMERAL_PORT
        st = self._state()
        st.setdefault("psk_store", {})
        st.setdefault("sessions", {})
        st.setdefault("peer_keys", {})
        net.register(self.name, self.receive)

    def __repr__(self):
        return f"ComputeTaskNode({self.id} on {self.platform.id})"

    def _ctx(self):
        return self.platform.enter(self.enclave_id)

    def _state(self) -> dict:
        return self._ctx().state

    def enclave_state(self) -> dict:
        """Test hook: enclave introspection."""
        return self._state()

    def session(self, flow: FlowKey) -> SessionState:
        """Test hook: the session state for ``flow`` (either direction)."""
        return self._state()["sessions"][flow.canonical()]

    def _event(self, kind: str, detail: str = "") -> None:
        self.counters[kind] += 1
        self.net.record(self.name, kind, detail)

    @property
    def nc_pk(self) -> bytes:
        # the controller's key is part of the measured image configuration
        return wire.unpack_fields(self._ctx().config, 2)[1]

    @property
    def public_key(self) -> bytes:
        return self.platform.host_read_state(self.enclave_id, "public_key")

    def accept_enrollment(self, data: bytes) -> None:
        ctx = self._ctx()
        keys = open_enrollment_message(ctx.keypair.secret, EnrollmentMessage.decode(data))
        ctx.state["k_alpha"] = keys.k_alpha

    def learn_peer(self, ct_id: str, pk: bytes) -> None:
        """Out-of-band CK distribution used by the baseline handshake."""
        self._state()["peer_keys"][ct_id] = pk

    # -- transport -------------------------------------------------------------

    def _send_packet(self, sess: SessionState, message: bytes) -> None:
        pkt = Packet(sess.out_flow, message, sess.packet_seq)
        sess.packet_seq += 1
        self.net.send(self.name, switch_node_name(self.switch_id), Segment.GAMMA, wire.frame(MsgType.DATA, pkt.encode()))

    def receive(self, env: Envelope) -> None:
        try:
            tag, payload = wire.unframe(env.data)
            if tag is MsgType.PSK_GRANT:
                self.receive_psk_grant(env.data)
            elif tag is MsgType.DATA:
                self._on_packet(Packet.decode(payload))
            else:
                self._event("unexpected_message", tag.name)
        except (WireFormatError, ValueError, UnicodeDecodeError) as exc:
            self._event("malformed", str(exc))
        except TrusdnError as exc:
            self._event("rejected", f"{type(exc).__name__}: {exc}")

    # -- flows -------------------------------------------------------------------

    def ct_open_flow(
        self,
        dst: str,
        payload: bytes = b"",
        *,
        src_port: Optional[int] = None,
        dst_port: int = 443,
        proto: int = 6,
        mode: Mode = Mode.PSK,
    ) -> FlowKey:
        """Start a flow to ``dst``: the first packet carries the client hello;
        ``payload`` is sent as the first record once the session is up."""
        if "k_alpha" not in self._state():
            raise NotEstablished(f"{self.id} is not enrolled")
        if src_port is None:
            src_port = self._next_port
            self._next_port = self._next_port + 1 if self._next_port < 65535 else FIRST_EPHEMERAL_PORT
        flow = FlowKey(self.id, dst, src_port, dst_port, proto)
        sess = SessionState(flow, "client", Mode(mode), client_nonce=self.rng.bytes(NONCE_LEN))
        if payload:
            sess.pending_out.append(payload)
        self._state()["sessions"][flow.canonical()] = sess
        self.flow_times[flow.canonical()] = {"opened": self.net.now()}
        if sess.mode is Mode.PSK:
            hello = wire.encode(MsgType.HELLO, sess.client_nonce)
        else:
            sess.eph_secret, eph_pub = crypto.x25519_keypair(self.rng)
            sess.handshake_pk_ops += 1
            sess.transcript = eph_pub
            hello = wire.encode(MsgType.BL_HELLO, sess.client_nonce, eph_pub)
        sess.handshake_messages += 1
        self._send_packet(sess, hello)
        self.net.schedule(HANDSHAKE_TIMEOUT, lambda: self._handshake_deadline(sess))
        return flow

    def _handshake_deadline(self, sess: SessionState) -> None:
        if not sess.established and sess.failed is None:
            sess.failed = "timeout"
            self._event("handshake_timeout", str(sess.flow))

    def _on_packet(self, pkt: Packet) -> None:
        if pkt.flow.dst != self.id:
            self._event("misdelivered", str(pkt.flow))
            return
        tag = wire.peek_type(pkt.payload)
        key = pkt.flow.canonical()
        sessions = self._state()["sessions"]
        if tag in (MsgType.HELLO, MsgType.BL_HELLO):
            fields = wire.decode(pkt.payload)[1]
            existing = sessions.get(key)
            if existing is not None and fields and existing.client_nonce == fields[0]:
                self._event("duplicate_hello", str(pkt.flow))
                return
            mode = Mode.PSK if tag is MsgType.HELLO else Mode.BASELINE
            sessions[key] = SessionState(pkt.flow, "server", mode)
            self.flow_times.setdefault(key, {})["first_packet"] = self.net.now()
        sess = sessions.get(key)
        if sess is None:
            self._event("no_session", str(pkt.flow))
            return
        if tag is MsgType.RECORD:
            self._on_record(sess, pkt.payload)
        else:
            self._handshake_input(sess, pkt.payload)

    # -- grants ------------------------------------------------------------------

    def receive_psk_grant(self, data: bytes) -> FlowKey:
        grant = PskGrant.decode(data)
        ctx = self._ctx()
        key = open_psk_grant(grant, self.id, ctx.keypair.secret, self.nc_pk)
        store = ctx.state["psk_store"]
        held = store.get(grant.flow)
        if held is not None and held[0] >= grant.epoch:
            self.counters["grant_replay_ignored"] += 1
            return grant.flow
        store[grant.flow] = (grant.epoch, key)
        self.counters["grants"] += 1
        sess = ctx.state["sessions"].get(grant.flow)
        if sess is not None and sess.waiting and sess.failed is None:
            queued, sess.waiting = sess.waiting, []
            for message in queued:
                self._handshake_input(sess, message)
        return grant.flow

    def _lookup_psk(self, flow: FlowKey) -> Optional[SymmetricKey]:
        held = self._state()["psk_store"].get(flow.canonical())
        return None if held is None else held[1]

    def _grant_deadline(self, sess: SessionState) -> None:
        if sess.waiting and sess.failed is None:
            sess.failed = "grant_timeout"
            sess.waiting = []
            self._event("handshake_timeout", f"no grant for {sess.flow}")

    # -- handshakes ------------------------------------------------------------

    def _handshake_input(self, sess: SessionState, message: bytes) -> None:
        if sess.failed is not None:
            return
        if sess.mode is Mode.PSK and sess.psk is None:
            sess.psk = self._lookup_psk(sess.flow)
            if sess.psk is None:
                if not sess.waiting:
                    self.net.schedule(GRANT_WAIT, lambda: self._grant_deadline(sess))
                sess.waiting.append(message)
                return
        try:
            if sess.mode is Mode.PSK:
                out = self.psk_handshake_step(sess, message)
            else:
                out = self.baseline_pk_handshake(sess, message)
        except (FinishedMismatch, CryptoError, WireFormatError, UnknownPeer) as exc:
            sess.failed = type(exc).__name__
            self._event("handshake_failed", f"{sess.flow}: {exc}")
            return
        if out is not None:
            sess.handshake_messages += 1
            self._send_packet(sess, out)
        if sess.established:
            self.flow_times.setdefault(sess.flow.canonical(), {})["established"] = self.net.now()
            queued, sess.pending_out = sess.pending_out, []
            for data in queued:
                self.secure_send(sess.flow, data)

    def psk_handshake_step(self, sess: SessionState, inbound: bytes) -> Optional[bytes]:
        """Advance the PSK handshake by one inbound message.  Returns the reply,
        if any; ``sess.established`` flips once the peer's finished verifies."""
        tag, fields = wire.decode(inbound)
        sess.handshake_messages += 1
        if sess.role == "server" and tag is MsgType.HELLO and not sess.server_nonce:
            (cn,) = fields
            if len(cn) != NONCE_LEN:
                raise WireFormatError("bad client nonce")
            sess.client_nonce, sess.server_nonce = cn, self.rng.bytes(NONCE_LEN)
            sess.transcript = psk_transcript(cn, sess.server_nonce, sess.flow)
            sess.session_key = derive_session_key(sess.psk.bytes, cn, sess.server_nonce, sess.flow)
            self.rng.note_secret(sess.session_key.bytes)
            fin = crypto.mac_tag(sess.session_key, SERVER_LABEL + sess.transcript)
            return wire.encode(MsgType.SERVER_HELLO, sess.server_nonce, fin.bytes)
        if sess.role == "client" and tag is MsgType.SERVER_HELLO and sess.session_key is None:
            sn, fin_s = fields
            if len(sn) != NONCE_LEN:
                raise WireFormatError("bad server nonce")
            sess.server_nonce = sn
            sess.transcript = psk_transcript(sess.client_nonce, sn, sess.flow)
            sess.session_key = derive_session_key(sess.psk.bytes, sess.client_nonce, sn, sess.flow)
            self.rng.note_secret(sess.session_key.bytes)
            if not crypto.mac_check(sess.session_key, SERVER_LABEL + sess.transcript, fin_s):
                raise FinishedMismatch("server finished does not verify")
            sess.established = True
            fin_c = crypto.mac_tag(sess.session_key, CLIENT_LABEL + sess.transcript)
            return wire.encode(MsgType.CLIENT_FINISHED, fin_c.bytes)
        if sess.role == "server" and tag is MsgType.CLIENT_FINISHED and sess.session_key is not None:
            (fin_c,) = fields
            if not crypto.mac_check(sess.session_key, CLIENT_LABEL + sess.transcript, fin_c):
                raise FinishedMismatch("client finished does not verify")
            sess.established = True
            return None
        raise WireFormatError(f"unexpected {tag.name} for {sess.role} in PSK handshake")

    def baseline_pk_handshake(self, sess: SessionState, inbound: bytes) -> Optional[bytes]:
        """Certificate-style handshake step (ephemeral DH + signatures)."""
        tag, fields = wire.decode(inbound)
        sess.handshake_messages += 1
        ctx = self._ctx()
        peer_pk = ctx.state["peer_keys"].get(sess.peer)
        if peer_pk is None:
            raise UnknownPeer(f"no CK public key for {sess.peer}")
        if sess.role == "server" and tag is MsgType.BL_HELLO and not sess.server_nonce:
            cn, eph_c = fields
            sess.client_nonce, sess.server_nonce = cn, self.rng.bytes(NONCE_LEN)
            sess.eph_secret, eph_s = crypto.x25519_keypair(self.rng)
            shared = crypto.x25519_shared(sess.eph_secret, eph_c)
            sess.transcript = baseline_transcript(cn, eph_c, sess.server_nonce, eph_s, sess.flow)
            sig = crypto.sign(ctx.keypair.secret, b"server" + sess.transcript)
            sess.handshake_pk_ops += 3
            sess.session_key = derive_session_key(shared, cn, sess.server_nonce, sess.flow)
            self.rng.note_secret(sess.session_key.bytes)
            return wire.encode(MsgType.BL_SERVER, sess.server_nonce, eph_s, sig.bytes)
        if sess.role == "client" and tag is MsgType.BL_SERVER and sess.session_key is None:
            sn, eph_s, sig_s = fields
            eph_c = sess.transcript
            shared = crypto.x25519_shared(sess.eph_secret, eph_s)
            sess.transcript = baseline_transcript(sess.client_nonce, eph_c, sn, eph_s, sess.flow)
            sess.handshake_pk_ops += 2
            if not crypto.verify(peer_pk, b"server" + sess.transcript, sig_s):
                raise FinishedMismatch("server signature does not verify")
            sess.server_nonce = sn
            sess.session_key = derive_session_key(shared, sess.client_nonce, sn, sess.flow)
            self.rng.note_secret(sess.session_key.bytes)
            sig_c = crypto.sign(ctx.keypair.secret, b"client" + sess.transcript)
            sess.handshake_pk_ops += 1
            fin_c = crypto.mac_tag(sess.session_key, CLIENT_LABEL + sess.transcript)
            return wire.encode(MsgType.BL_CLIENT_FINISHED, sig_c.bytes, fin_c.bytes)
        if sess.role == "server" and tag is MsgType.BL_CLIENT_FINISHED and sess.session_key is not None:
            sig_c, fin_c = fields
            sess.handshake_pk_ops += 1
            if not crypto.verify(peer_pk, b"client" + sess.transcript, sig_c):
                raise FinishedMismatch("client signature does not verify")
            if not crypto.mac_check(sess.session_key, CLIENT_LABEL + sess.transcript, fin_c):
                raise FinishedMismatch("client finished does not verify")
            sess.established = True
            fin_s = crypto.mac_tag(sess.session_key, SERVER_LABEL + sess.transcript)
            return wire.encode(MsgType.BL_SERVER_FINISHED, fin_s.bytes)
        if sess.role == "client" and tag is MsgType.BL_SERVER_FINISHED and sess.session_key is not None:
            (fin_s,) = fields
            if not crypto.mac_check(sess.session_key, SERVER_LABEL + sess.transcript, fin_s):
                raise FinishedMismatch("server finished does not verify")
            sess.established = True
            return None
        raise WireFormatError(f"unexpected {tag.name} for {sess.role} in baseline handshake")

    # -- records -----------------------------------------------------------------

    def secure_send(self, flow: FlowKey, data: bytes) -> None:
        sess = self._state()["sessions"].get(flow.canonical())
        if sess is None or not sess.established:
            raise NotEstablished(f"no established session for {flow}")
        seq = sess.send_seq
        sealed = crypto.sym_seal(sess.session_key, data, aad=record_aad(self.id, seq, sess.flow), sender=self.id.encode())
        sess.send_seq += 1
        self._send_packet(sess, wire.encode(MsgType.RECORD, wire.u64(seq), sealed.to_bytes()))

    def _on_record(self, sess: SessionState, message: bytes) -> None:
        try:
            self.open_record(sess, message)
        except (NotEstablished, CryptoError, WireFormatError) as exc:
            self._event("record_rejected", f"{sess.flow}: {type(exc).__name__}: {exc}")

    def open_record(self, sess: SessionState, message: bytes) -> bytes:
        if not sess.established:
            raise NotEstablished(f"record before handshake on {sess.flow}")
        _, (seq, sealed) = wire.decode(message, MsgType.RECORD, 2)
        seq = wire.read_u64(seq)
        if seq != sess.recv_seq:
            # window 0: anything but the next record is a replay or reorder
            raise AuthenticationFailure(f"record {seq} out of order (expected {sess.recv_seq})")
        data = crypto.sym_open(sess.session_key, crypto.Ciphertext.from_bytes(sealed), aad=record_aad(sess.peer, seq, sess.flow))
        sess.recv_seq += 1
        sess.received.append(data)
        self.counters["records_received"] += 1
        return data

    def secure_recv(self, flow: FlowKey) -> list[bytes]:
        """Drain the application data received on ``flow``."""
        sess = self._state()["sessions"].get(flow.canonical())
        if sess is None or not sess.established:
            raise NotEstablished(f"no established session for {flow}")
        out, sess.received = sess.received, []
        return out
