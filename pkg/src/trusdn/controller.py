"""The network controller: global view, enrollment, rule compilation and
flow-key distribution."""

from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from . import crypto, wire
from .attestation import AttestationResult, PlatformSignatureList, Verdict, Verifier, attest_enclave
from .crypto import Ciphertext, KeyOwner, KeyRole, PseudonymBase, SymmetricKey
from .enclave import EnclaveKind, Measurement, Platform, measure
from .endpoint import ComputeTaskNode
from .errors import (
    AuthenticationFailure,
    CryptoError,
    EnrollmentRejected,
    NoSuchSwitch,
    TransportError,
    UnknownEndpoint,
    WireFormatError,
)
from .flows import DROP, FlowKey, FlowMatch, FlowRule, Packet, RuleAction, encode_rules
from .messages import build_enrollment_message, make_psk_grant
from .sim import Envelope, Network, Segment
from .switch import (
    DOMAIN_KEY_AAD,
    PACKET_IN_AAD,
    RULE_INSTALL_AAD,
    SwitchNode,
    ct_node_name,
    encode_domain_update,
    switch_node_name,
)
from .wire import MsgType

log = logging.getLogger(__name__)

FLOW_PRIORITY = 100
NC_LANE = b"nc"


@dataclass
class SwitchRecord:
    platform: str
    enclave: str
    measurement: Measurement
    k_alpha: SymmetricKey = field(repr=False)
    domain: str


@dataclass
class CtRecord:
    platform: str
    enclave: str
    ck_pk: bytes
    switch: str
    k_alpha: SymmetricKey = field(repr=False)


@dataclass
class DomainRecord:
    k_beta: SymmetricKey = field(repr=False)
    epoch: int = 0
    members: list = field(default_factory=list)


@dataclass
class GlobalView:
    hosts: set = field(default_factory=set)
    switches: dict = field(default_factory=dict)
    compute_tasks: dict = field(default_factory=dict)
    domains: dict = field(default_factory=dict)
    links: dict = field(default_factory=dict)

    def add_link(self, a: str, b: str) -> None:
        self.links.setdefault(a, set()).add(b)
        self.links.setdefault(b, set()).add(a)

    def nodes(self) -> set:
        return (
            {f"host:{h}" for h in self.hosts}
            | {switch_node_name(s) for s in self.switches}
            | {ct_node_name(c) for c in self.compute_tasks}
        )

    def problems(self, verdicts: dict) -> list[str]:
        """Invariant violations (empty when the view is consistent)."""
        out = []
        for cid in list(self.switches) + list(self.compute_tasks):
            if verdicts.get(cid) is not Verdict.ACCEPTED:
                out.append(f"{cid} in view without an Accepted verdict")
        known = self.nodes()
        for a, peers in self.links.items():
            for b in peers:
                if a not in known or b not in known:
                    out.append(f"dangling link {a} -- {b}")
        for sid, rec in self.switches.items():
            homes = [d for d, dom in self.domains.items() if sid in dom.members]
            if homes != [rec.domain]:
                out.append(f"{sid} belongs to domains {homes}")
        return out


class Controller:
    def __init__(
        self,
        net: Network,
        rng: crypto.DeterministicRandom,
        verifier: Verifier,
        *,
        psk_mode: bool = True,
        cuckoo_list: Optional[PlatformSignatureList] = None,
        name: str = "nc",
    ):
        self.net = net
        self.rng = rng
        self.verifier = verifier
        self.psk_mode = psk_mode
        self.cuckoo_list = cuckoo_list
        self.name = name
        self.keypair = crypto.generate_keypair(KeyOwner.CONTROLLER, rng)
        self.view = GlobalView()
        self.verdicts: dict[str, Verdict] = {}
        self.attestation_log: list[tuple[str, Verdict]] = []
        self.approved: dict[EnclaveKind, list[Measurement]] = {}
        self.switch_nodes: dict[str, SwitchNode] = {}
        self.ct_nodes: dict[str, ComputeTaskNode] = {}
        # flow-key bookkeeping; the controller keeps every key it hands out
        self.flow_epoch = 0
        self.psks: dict[tuple[FlowKey, int], SymmetricKey] = {}
        self.granted: dict[FlowKey, int] = {}
        self.flow_stats: dict[FlowKey, Counter] = {}
        self.timings: dict[FlowKey, dict[str, int]] = {}
        self.counters: Counter = Counter()
        self.issued_rules: dict[str, FlowRule] = {}
        self._rule_seq = 0
        self._ids: Counter = Counter()
        net.register(name, self.receive)

    def _new_id(self, prefix: str) -> str:
        while True:
            self._ids[prefix] += 1
            cid = f"{prefix}{self._ids[prefix]}"
            if cid not in self.verdicts:
                return cid

    # -- images and attestation ---------------------------------------------

    def image_config(self, config: bytes) -> bytes:
        """Deployment configuration as measured: the caller's bytes plus the
        controller's public key, which endpoints use to check grants."""
        return wire.pack_fields(config, self.keypair.public)

    def approve_image(self, kind: EnclaveKind, code: bytes, config: bytes) -> Measurement:
        m = measure(kind, code, self.image_config(config))
        self.approved.setdefault(kind, []).append(m)
        return m

    def _expected(self, kind: EnclaveKind, code: bytes, config: bytes) -> list[Measurement]:
        m = measure(kind, code, self.image_config(config))
        allow = self.approved.get(kind)
        if allow is None:
            return [m]
        return [m] if m in allow else []

    def _attestation_base(self) -> PseudonymBase:
        if self.cuckoo_list is not None:
            return self.cuckoo_list.base
        return PseudonymBase.random(self.rng)

    def _attest(self, component: str, platform: Platform, eid: str, expected) -> AttestationResult:
        result = attest_enclave(
            self.verifier,
            platform,
            eid,
            expected,
            self._attestation_base(),
            exchange=self.net.exchanger(Segment.ALPHA),
            cuckoo_list=self.cuckoo_list,
        )
        self.attestation_log.append((component, result.verdict))
        self.net.record(self.name, "attestation", f"{component}: {result.verdict.value}")
        return result

    def _enroll(self, component: str, node, ek_pk: bytes, k_alpha, k_beta, epoch) -> None:
        msg = build_enrollment_message(ek_pk, k_alpha, k_beta, epoch, self.rng)
        delivered = self.net.exchange(self.name, node.name, Segment.ALPHA, msg.encode())
        try:
            node.accept_enrollment(delivered)
        except (CryptoError, WireFormatError) as exc:
            self.net.record(self.name, "enrollment_failed", f"{component}: {exc}")
            raise TransportError(f"enrollment of {component} failed: {exc}") from exc

    # -- deployment ----------------------------------------------------------

    def deploy_and_enroll_switch(
        self, platform: Platform, code: bytes, config: bytes, domain: str, switch_id: Optional[str] = None
    ) -> str:
        switch_id = switch_id or self._new_id("s")
        expected = self._expected(EnclaveKind.SWITCH, code, config)
        eid = platform.bootstrap(EnclaveKind.SWITCH, code, self.image_config(config))
        result = self._attest(switch_id, platform, eid, expected)
        self.verdicts[switch_id] = result.verdict
        if not result.accepted:
            raise EnrollmentRejected(result.verdict)
        dom = self.view.domains.get(domain)
        fresh_domain = dom is None
        if fresh_domain:
            dom = DomainRecord(crypto.generate_symmetric_key(KeyRole.DOMAIN_BETA, self.rng))
        k_alpha = crypto.generate_symmetric_key(KeyRole.SESSION_ALPHA, self.rng)
        node = SwitchNode(self.net, platform, eid, switch_id, self.name)
        try:
            self._enroll(switch_id, node, result.enclave_pk, k_alpha, dom.k_beta, dom.epoch)
        except TransportError:
            self.net.nodes.pop(node.name, None)
            self.verdicts.pop(switch_id, None)
            raise
        if fresh_domain:
            self.view.domains[domain] = dom
        dom.members.append(switch_id)
        self.view.hosts.add(platform.id)
        self.view.switches[switch_id] = SwitchRecord(platform.id, eid, result.quote.report.reporter_measurement, k_alpha, domain)
        self.view.add_link(f"host:{platform.id}", node.name)
        self.switch_nodes[switch_id] = node
        for member in dom.members:
            self._push_domain(member, dom, sync=True)
        return switch_id

    def deploy_and_enroll_ct(
        self, platform: Platform, code: bytes, config: bytes, attach_to: str, ct_id: Optional[str] = None
    ) -> str:
        rec = self.view.switches.get(attach_to)
        if rec is None or rec.platform != platform.id:
            raise NoSuchSwitch(f"no enrolled switch {attach_to!r} on platform {platform.id}")
        ct_id = ct_id or self._new_id("c")
        expected = self._expected(EnclaveKind.COMPUTE_TASK, code, config)
        eid = platform.bootstrap(EnclaveKind.COMPUTE_TASK, code, self.image_config(config))
        result = self._attest(ct_id, platform, eid, expected)
        self.verdicts[ct_id] = result.verdict
        if not result.accepted:
            raise EnrollmentRejected(result.verdict)
        k_alpha = crypto.generate_symmetric_key(KeyRole.SESSION_ALPHA, self.rng)
        node = ComputeTaskNode(self.net, platform, eid, ct_id, attach_to, self.rng.fork(f"ct:{ct_id}"))
        try:
            self._enroll(ct_id, node, result.enclave_pk, k_alpha, None, 0)
        except TransportError:
            self.net.nodes.pop(node.name, None)
            self.verdicts.pop(ct_id, None)
            raise
        self.view.compute_tasks[ct_id] = CtRecord(platform.id, eid, result.enclave_pk, attach_to, k_alpha)
        self.view.add_link(switch_node_name(attach_to), node.name)
        self.ct_nodes[ct_id] = node
        return ct_id

    # -- domain keys -----------------------------------------------------------

    def _push_domain(self, switch_id: str, dom: DomainRecord, *, sync: bool) -> None:
        rec = self.view.switches[switch_id]
        sealed = crypto.sym_seal(
            rec.k_alpha,
            encode_domain_update(dom.epoch, dom.k_beta, dom.members),
            aad=DOMAIN_KEY_AAD + switch_id.encode(),
            sender=NC_LANE,
        )
        data = wire.encode(MsgType.DOMAIN_KEY, switch_id.encode(), sealed.to_bytes())
        if sync:
            delivered = self.net.exchange(self.name, switch_node_name(switch_id), Segment.ALPHA, data)
            self.switch_nodes[switch_id].receive(Envelope(self.name, switch_node_name(switch_id), Segment.ALPHA, delivered))
        else:
            self.net.send(self.name, switch_node_name(switch_id), Segment.ALPHA, data, serialize=True)

    def rotate_domain_key(self, domain: str) -> int:
        dom = self.view.domains[domain]
        dom.k_beta = crypto.generate_symmetric_key(KeyRole.DOMAIN_BETA, self.rng)
        dom.epoch += 1
        for member in dom.members:
            self._push_domain(member, dom, sync=False)
        self.net.record(self.name, "domain_rotated", f"{domain} epoch {dom.epoch}")
        return dom.epoch

    # -- packet-in -------------------------------------------------------------

    def receive(self, env: Envelope) -> None:
        try:
            tag, fields = wire.decode(env.data)
            if tag is not MsgType.PACKET_IN or len(fields) != 2:
                self.net.record(self.name, "unexpected_message", tag.name)
                return
            switch_id = fields[0].decode()
            out = self.handle_packet_in(switch_id, Ciphertext.from_bytes(fields[1]))
        except AuthenticationFailure as exc:
            self.counters["packet_in_rejected"] += 1
            self.net.record(self.name, "packet_in_rejected", str(exc))
            return
        except (WireFormatError, ValueError, UnicodeDecodeError) as exc:
            self.net.record(self.name, "malformed", str(exc))
            return
        for dst, segment, data in out:
            self.net.send(self.name, dst, segment, data, serialize=True)

    def generate_flow_psk(self, flow: FlowKey) -> SymmetricKey:
        key = crypto.generate_symmetric_key(KeyRole.FLOW_PSK, self.rng)
        self.psks[(flow.canonical(), self.flow_epoch)] = key
        return key

    def _next_rule_id(self, flow: FlowKey, direction: str) -> str:
        self._rule_seq += 1
        return f"r{self._rule_seq}-{direction}"

    def _rules_for(self, flow: FlowKey, src_rec: CtRecord, dst_rec: Optional[CtRecord]) -> dict[str, list[FlowRule]]:
        """Compile exact-match rules for both directions of ``flow``, keyed by switch."""
        fwd, rev = flow, flow.reversed()

        def rule(f: FlowKey, action: RuleAction, d: str) -> FlowRule:
            r = FlowRule(self._next_rule_id(f, d), FlowMatch.exact(f), action, FLOW_PRIORITY)
            self.issued_rules[r.id] = r
            return r

        s_src = src_rec.switch
        if dst_rec is None:
            return {s_src: [rule(fwd, DROP, "fwd")]}
        s_dst = dst_rec.switch
        if s_src == s_dst:
            return {
                s_src: [
                    rule(fwd, RuleAction.forward_local(flow.dst), "fwd"),
                    rule(rev, RuleAction.forward_local(flow.src), "rev"),
                ]
            }
        if self.view.switches[s_src].domain != self.view.switches[s_dst].domain:
            return {s_src: [rule(fwd, DROP, "fwd")]}
        return {
            s_dst: [
                rule(fwd, RuleAction.forward_local(flow.dst), "fwd"),
                rule(rev, RuleAction.forward_tunnel(s_src), "rev"),
            ],
            s_src: [
                rule(fwd, RuleAction.forward_tunnel(s_dst), "fwd"),
                rule(rev, RuleAction.forward_local(flow.src), "rev"),
            ],
        }

    def handle_packet_in(self, from_switch: str, sealed: Ciphertext) -> list[tuple[str, Segment, bytes]]:
        """Process one packet-in; returns the control messages to send, in order."""
        rec = self.view.switches.get(from_switch)
        if rec is None:
            raise AuthenticationFailure(f"packet-in from unknown switch {from_switch!r}")
        pkt = Packet.decode(crypto.sym_open(rec.k_alpha, sealed, aad=PACKET_IN_AAD + from_switch.encode()))
        flow = pkt.flow
        key = flow.canonical()
        stats = self.flow_stats.setdefault(key, Counter())
        stats["packet_in"] += 1
        self.counters["packet_in"] += 1
        if self.granted.get(key) == self.flow_epoch:
            stats["suppressed"] += 1
            self.counters["packet_in_suppressed"] += 1
            return []
        src_rec = self.view.compute_tasks.get(flow.src)
        if src_rec is None or src_rec.switch != from_switch:
            self.net.record(self.name, "spoofed_source", str(flow))
            return []
        self.granted[key] = self.flow_epoch
        dst_rec = self.view.compute_tasks.get(flow.dst)
        out: list[tuple[str, Segment, bytes]] = []
        if dst_rec is None:
            self.net.record(self.name, "unknown_endpoint", str(UnknownEndpoint(flow.dst)))
        elif self.psk_mode:
            t0 = time.perf_counter_ns()
            psk = self.generate_flow_psk(flow)
            t1 = time.perf_counter_ns()
            grant = make_psk_grant(
                key,
                self.flow_epoch,
                psk,
                ((flow.src, src_rec.ck_pk), (flow.dst, dst_rec.ck_pk)),
                self.keypair.secret,
                self.rng,
            )
            t2 = time.perf_counter_ns()
            self.timings[key] = {"keygen_ns": t1 - t0, "distribution_ns": t2 - t1}
            data = grant.encode()
            out.append((ct_node_name(flow.src), Segment.ALPHA, data))
            out.append((ct_node_name(flow.dst), Segment.ALPHA, data))
            stats["grants"] += 1
            self.counters["grants"] += 1
        rules = self._rules_for(flow, src_rec, dst_rec)
        # the far switch first, so the tunnel exit is ready before the entry
        for sid in sorted(rules, key=lambda s: s == from_switch):
            payload = encode_rules(rules[sid])
            sealed_rules = crypto.sym_seal(
                self.view.switches[sid].k_alpha, payload, aad=RULE_INSTALL_AAD + sid.encode(), sender=NC_LANE
            )
            out.append((switch_node_name(sid), Segment.ALPHA, wire.encode(MsgType.RULE_INSTALL, sid.encode(), sealed_rules.to_bytes())))
            stats["rule_installs"] += 1
            self.counters["rule_installs"] += 1
        return out

    def flush_flows(self) -> None:
        """Forget granted flows and clear every switch FIB, so the next packet of
        any flow is a miss again."""
        self.flow_epoch += 1
        self.granted.clear()
        for node in self.switch_nodes.values():
            node.flush_rules()

    def grant_for(self, flow: FlowKey, epoch: Optional[int] = None) -> Optional[SymmetricKey]:
        return self.psks.get((flow.canonical(), self.flow_epoch if epoch is None else epoch))
