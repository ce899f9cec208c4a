"""Network adversary and scenario runner.

The :class:`AdversaryTap` sits on every link of a :class:`~trusdn.sim.Network`:
it records each message and applies scripted drop, tamper, delay, replay and
forge actions.  A :class:`Scenario` (JSON) describes a topology, an adversary
script and the assertions checked once the simulation is quiescent.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from . import crypto, wire
from .attestation import (
    EpidAuthority,
    Verifier,
    anti_cuckoo_check,
    attest_enclave,
    issue_verifier_certificate,
    publish_platform_list,
)
from .controller import Controller
from .crypto import DeterministicRandom, PseudonymBase
from .enclave import Datacenter, EnclaveKind, Platform
from .endpoint import Mode
from .errors import EnrollmentRejected, ParseError, TopologyError, TransportError
from .flows import FlowKey
from .messages import make_psk_grant
from .sim import Envelope, Network, Segment
from .switch import BetaFrame, ct_node_name, switch_node_name
from .wire import MsgType

log = logging.getLogger(__name__)

SWITCH_CODE = b"trusdn software switch v1"
CT_CODE = b"trusdn compute task v1"
PROVIDER_BASE = "trusdn-provider"
MAX_TICKS = 50_000


# ---------------------------------------------------------------------------
# the tap
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Recorded:
    tick: int
    segment: Segment
    src: str
    dst: str
    data: bytes


@dataclass
class MsgFilter:
    segment: Optional[Segment] = None
    msg_type: Optional[MsgType] = None
    src: Optional[str] = None
    dst: Optional[str] = None

    def matches(self, env: Envelope) -> bool:
        return (
            (self.segment is None or env.segment == self.segment)
            and (self.msg_type is None or wire.peek_type(env.data) == self.msg_type)
            and (self.src is None or env.src == self.src)
            and (self.dst is None or env.dst == self.dst)
        )


@dataclass
class Drop:
    filter: MsgFilter
    rate: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("drop rate must lie in [0, 1]")


@dataclass
class Tamper:
    """Flip one bit of matching messages (``nth`` match only, or all)."""

    filter: MsgFilter
    offset: int = -1
    nth: Optional[int] = None
    mutate: Optional[Callable[[bytes], bytes]] = None
    seen: int = 0


@dataclass
class Delay:
    """Hold matching messages back by ``ticks`` so later ones overtake them."""

    filter: MsgFilter
    ticks: int = 3
    nth: Optional[int] = None
    seen: int = 0


@dataclass
class Substitute:
    """Replace the ``nth`` matching message with an earlier recording."""

    filter: MsgFilter
    capture: int = 0
    nth: int = 0
    seen: int = 0


def _flip(data: bytes, offset: int) -> bytes:
    buf = bytearray(data)
    buf[offset % len(buf)] ^= 0x01
    return bytes(buf)


class AdversaryTap:
    def __init__(self, rng: DeterministicRandom):
        self.rng = rng
        self._recorded: list[Recorded] = []
        self.actions: list = []
        self.net: Optional[Network] = None
        self.injected = 0

    def attach(self, net: Network) -> None:
        self.net = net

    @property
    def recorded(self) -> tuple[Recorded, ...]:
        return tuple(self._recorded)

    def captures(self, msg_type: MsgType, **where) -> list[Recorded]:
        return [
            r
            for r in self._recorded
            if wire.peek_type(r.data) == msg_type and all(getattr(r, k) == v for k, v in where.items())
        ]

    def add(self, action) -> None:
        self.actions.append(action)

    def remove(self, action) -> None:
        self.actions.remove(action)

    def _record(self, tick: int, env: Envelope) -> None:
        self._recorded.append(Recorded(tick, env.segment, env.src, env.dst, env.data))

    def on_send(self, tick: int, env: Envelope) -> list[tuple[int, Envelope]]:
        self._record(tick, env)
        delay = 0
        for action in self.actions:
            if not action.filter.matches(env):
                continue
            if isinstance(action, Drop):
                if action.rate >= 1.0 or self.rng.random() < action.rate:
                    return []
            elif isinstance(action, Tamper):
                if action.nth is None or action.nth == action.seen:
                    data = action.mutate(env.data) if action.mutate else _flip(env.data, action.offset)
                    env = Envelope(env.src, env.dst, env.segment, data)
                action.seen += 1
            elif isinstance(action, Delay):
                if action.nth is None or action.nth == action.seen:
                    delay += action.ticks
                action.seen += 1
        return [(delay, env)]

    def on_exchange(self, tick: int, env: Envelope) -> Optional[bytes]:
        self._record(tick, env)
        data = env.data
        for action in self.actions:
            if not action.filter.matches(env):
                continue
            if isinstance(action, Drop):
                if action.rate >= 1.0 or self.rng.random() < action.rate:
                    return None
            elif isinstance(action, Substitute):
                if action.seen == action.nth:
                    caps = self.captures(action.filter.msg_type)
                    if action.capture < len(caps) - 1:
                        data = caps[action.capture].data
                action.seen += 1
            elif isinstance(action, Tamper):
                if action.nth is None or action.nth == action.seen:
                    data = action.mutate(data) if action.mutate else _flip(data, action.offset)
                action.seen += 1
        return data

    def inject(self, dst: str, segment: Segment, data: bytes, src: str = "adversary") -> None:
        self.injected += 1
        self.net.inject(Envelope(src, dst, Segment(segment), data))

    def replay(self, index: int, dst: Optional[str] = None) -> None:
        r = self._recorded[index]
        self.inject(dst or r.dst, r.segment, r.data, r.src)

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self._recorded:
            h.update(wire.pack_fields(wire.u64(r.tick), r.segment.value.encode(), r.src.encode(), r.dst.encode(), r.data))
        return h.hexdigest()


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

ACTIONS = {
    "drop",
    "degrade",
    "tamper",
    "delay",
    "replay",
    "replay_quote",
    "forge",
    "rotate",
    "sybil_switch",
    "cuckoo",
}
FORGE_KINDS = {"rule", "retarget_rule", "grant", "packet_in", "beta"}
CHECKS = {
    "enrollment_gate",
    "no_key_material",
    "no_payload_plaintext",
    "one_psk_per_flow",
    "forged_message_rejection",
    "fib_integrity",
    "flows_established",
    "payloads_delivered",
    "event",
    "outcome",
    "verdict",
    "not_enrolled",
    "min_established",
}
SAFETY = ["enrollment_gate", "no_key_material", "no_payload_plaintext", "one_psk_per_flow", "forged_message_rejection", "fib_integrity"]


@dataclass
class Scenario:
    name: str
    topology: dict
    adversary_script: list = field(default_factory=list)
    assertions: list = field(default_factory=list)
    seed: int = 0

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
        if not isinstance(d, dict):
            raise ParseError("scenario must be a JSON object", line=1)
        missing = [k for k in ("name", "topology", "assertions") if k not in d]
        if missing:
            raise ParseError(f"missing keys: {', '.join(missing)}")
        unknown = set(d) - {"name", "topology", "adversary_script", "assertions", "seed", "description"}
        if unknown:
            raise ParseError(f"unknown keys: {', '.join(sorted(unknown))}")
        s = cls(d["name"], d["topology"], list(d.get("adversary_script", [])), list(d["assertions"]), int(d.get("seed", 0)))
        s.validate_schema()
        return s

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_json(Path(path).read_text())

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "seed": self.seed,
                "topology": self.topology,
                "adversary_script": self.adversary_script,
                "assertions": self.assertions,
            },
            indent=2,
        )

    def validate_schema(self) -> None:
        if not isinstance(self.topology, dict):
            raise ParseError("topology must be an object")
        for item in self.adversary_script:
            if not isinstance(item, dict) or item.get("do") not in ACTIONS:
                raise ParseError(f"unknown adversary action: {item!r}")
            if item["do"] == "forge" and item.get("kind") not in FORGE_KINDS:
                raise ParseError(f"unknown forge kind: {item.get('kind')!r}")
        for a in self.assertions:
            name = a if isinstance(a, str) else a.get("check") if isinstance(a, dict) else None
            if name not in CHECKS and name != "safety":
                raise ParseError(f"unknown assertion: {a!r}")


def _assertion_label(a) -> str:
    if isinstance(a, str):
        return a
    extra = ",".join(f"{k}={v}" for k, v in a.items() if k != "check")
    return f"{a['check']}({extra})" if extra else a["check"]


@dataclass
class ScenarioReport:
    name: str
    seed: int
    passed: dict[str, bool]
    transcript_digest: str
    metrics: dict[str, int]
    details: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def render(self) -> str:
        lines = [f"scenario {self.name} seed={self.seed} digest={self.transcript_digest[:16]}"]
        for label, ok in self.passed.items():
            note = f"  ({self.details[label]})" if label in self.details and not ok else ""
            lines.append(f"  {'PASS' if ok else 'FAIL'} {label}{note}")
        return "\n".join(lines)


# -- scenario mutations ------------------------------------------------------


def inject_sybil_switch(s: Scenario, platform: str, code: bytes, switch_id: Optional[str] = None) -> Scenario:
    item = {"do": "sybil_switch", "platform": platform, "code": code.decode("latin-1")}
    if switch_id:
        item["id"] = switch_id
    s.adversary_script.append(item)
    return s


def enable_cuckoo(s: Scenario, victim: str, malicious: str) -> Scenario:
    s.adversary_script.append({"do": "cuckoo", "victim": victim, "malicious": malicious})
    return s


def degrade_network(s: Scenario, drop_rate: float, segment: str) -> Scenario:
    if not 0.0 <= drop_rate <= 1.0:
        raise ValueError("drop_rate must lie in [0, 1]")
    s.adversary_script.append({"do": "degrade", "segment": segment, "rate": drop_rate})
    return s


# -- the runner ----------------------------------------------------------------


@dataclass
class FlowRun:
    src: str
    dst: str
    mode: Mode
    payload: bytes
    flow: Any = None


def _filter(item: dict) -> MsgFilter:
    return MsgFilter(
        Segment(item["segment"]) if item.get("segment") else None,
        MsgType[item["type"]] if item.get("type") else None,
        item.get("src"),
        item.get("dst"),
    )


class _Run:
    def __init__(self, scenario: Scenario, seed: int):
        self.s = scenario
        self.seed = seed
        self.rng = DeterministicRandom(seed)
        self.secrets: set[bytes] = set()
        self.rng.observers.append(self._note)
        self.tap = AdversaryTap(self.rng.fork("adversary"))
        self.net = Network(self.tap)
        self.outcomes: dict[str, Any] = {}
        self.flows: list[FlowRun] = []
        self.sent_payloads: set[bytes] = set()

    def _note(self, value: bytes) -> None:
        if len(value) >= 32:
            self.secrets.add(bytes(value[:32]))

    # topology ---------------------------------------------------------------

    def build(self) -> None:
        topo = self.s.topology
        try:
            plats = topo["platforms"]
            switches = topo.get("switches", [])
            cts = topo.get("compute_tasks", [])
        except (KeyError, TypeError):
            raise TopologyError("topology needs a platforms list") from None
        pids = [p["id"] for p in plats]
        if len(set(pids)) != len(pids):
            raise TopologyError("duplicate platform id")
        sw_platform = {}
        for sw in switches:
            if sw.get("platform") not in pids:
                raise TopologyError(f"switch {sw.get('id')} on unknown platform")
            if sw["id"] in sw_platform:
                raise TopologyError(f"duplicate switch {sw['id']}")
            sw_platform[sw["id"]] = sw["platform"]
        ct_ids = set()
        for ct in cts:
            if sw_platform.get(ct.get("switch")) != ct.get("platform"):
                raise TopologyError(f"compute task {ct.get('id')} not co-located with its switch")
            if ct["id"] in ct_ids:
                raise TopologyError(f"duplicate compute task {ct['id']}")
            ct_ids.add(ct["id"])
        for f in topo.get("flows", []):
            if f.get("src") not in ct_ids:
                raise TopologyError(f"flow from unknown compute task {f.get('src')}")

        self.authority = EpidAuthority(self.rng.fork("authority"))
        self.dc = Datacenter()
        self.platforms: dict[str, Platform] = {}
        for p in plats:
            self.platforms[p["id"]] = self.dc.add(self.authority.new_platform(p["id"], honest=p.get("honest", True)))
        verifier = Verifier("nc", self.authority.group, self.rng.fork("nc-verifier"), root_pk=self.authority.root_pk, clock=self.net.now)
        self.cuckoo_list = None
        if topo.get("anti_cuckoo", False):
            vp = Verifier("provider", self.authority.group, self.rng.fork("provider"), root_pk=self.authority.root_pk)
            vp.credential = [issue_verifier_certificate(self.authority, "provider", vp.keypair.public, base_name=PROVIDER_BASE, is_ca=True)]
            verifier.credential = [
                issue_verifier_certificate(vp, "nc", verifier.keypair.public, base_name=PROVIDER_BASE),
                vp.credential[0],
            ]
            self.vp = vp
            listed = [self.platforms[p["id"]] for p in plats if p.get("listed", True)]
            self.cuckoo_list = publish_platform_list(vp, listed)
        self.nc = Controller(self.net, self.rng.fork("nc"), verifier, psk_mode=topo.get("psk_mode", True), cuckoo_list=self.cuckoo_list)
        self.nc.approve_image(EnclaveKind.SWITCH, SWITCH_CODE, b"")
        self.nc.approve_image(EnclaveKind.COMPUTE_TASK, CT_CODE, b"")

        for sw in switches:
            self._deploy(sw["id"], lambda sw=sw: self.nc.deploy_and_enroll_switch(
                self.platforms[sw["platform"]], self._code(sw, SWITCH_CODE), b"", sw.get("domain", "d1"), sw["id"]
            ))
        for ct in cts:
            self._deploy(ct["id"], lambda ct=ct: self.nc.deploy_and_enroll_ct(
                self.platforms[ct["platform"]], self._code(ct, CT_CODE), b"", ct["switch"], ct["id"]
            ))
        nodes = list(self.nc.ct_nodes.values())
        for a in nodes:
            for b in nodes:
                if a is not b:
                    a.learn_peer(b.id, b.public_key)

    @staticmethod
    def _code(item: dict, legit: bytes) -> bytes:
        return item["code"].encode("latin-1") if "code" in item else legit

    def _deploy(self, component: str, deploy: Callable[[], str]) -> None:
        hooks = [a for a in self.s.adversary_script if a["do"] == "replay_quote" and a.get("when", {}).get("deploy") == component]
        installed = []
        for h in hooks:
            sub = Substitute(MsgFilter(msg_type=MsgType.QUOTE), capture=h.get("capture", 0), nth=0)
            self.tap.add(sub)
            installed.append(sub)
        try:
            deploy()
            self.outcomes[f"deploy.{component}"] = "Enrolled"
        except EnrollmentRejected as exc:
            self.outcomes[f"deploy.{component}"] = exc.verdict.value
        except TransportError:
            self.outcomes[f"deploy.{component}"] = "TransportError"
        finally:
            for sub in installed:
                self.tap.remove(sub)

    # adversary script -------------------------------------------------------------

    def arm(self) -> None:
        for item in self.s.adversary_script:
            do = item["do"]
            at = item.get("at")
            if do in ("drop", "degrade"):
                seg = {"segment": item.get("segment")} if do == "degrade" else item
                self._timed(item, Drop(_filter(seg), float(item.get("rate", 1.0))))
            elif do == "tamper":
                mutate = _header_mutator(item["field"]) if item.get("field") else None
                self._timed(item, Tamper(_filter(item), int(item.get("offset", -1)), item.get("nth"), mutate))
            elif do == "delay":
                self._timed(item, Delay(_filter(item), int(item.get("ticks", 3)), item.get("nth")))
            elif do == "replay":
                self.net.schedule_at(int(at), lambda item=item: self._replay(item))
            elif do == "forge":
                self.net.schedule_at(int(at), lambda item=item: self._forge(item))
            elif do == "rotate":
                self.net.schedule_at(int(at), lambda item=item: self.nc.rotate_domain_key(item.get("domain", "d1")))
            elif do == "sybil_switch":
                self._sybil(item)
            elif do == "cuckoo":
                self._cuckoo(item)

    def _timed(self, item: dict, action) -> None:
        start, end = item.get("from"), item.get("until")
        if start is None:
            self.tap.add(action)
        else:
            self.net.schedule_at(int(start), lambda: self.tap.add(action))
        if end is not None:
            self.net.schedule_at(int(end), lambda: action in self.tap.actions and self.tap.remove(action))

    def _replay(self, item: dict) -> None:
        caps = [i for i, r in enumerate(self.tap.recorded) if wire.peek_type(r.data) == MsgType[item["type"]]]
        idx = item.get("capture", 0)
        if idx < len(caps):
            self.tap.replay(caps[idx], item.get("to"))
            self.outcomes[f"replay.{item['type']}"] = "injected"
        else:
            self.outcomes[f"replay.{item['type']}"] = "nothing captured"

    def _forge(self, item: dict) -> None:
        kind, target, rng = item["kind"], item.get("target", ""), self.tap.rng
        if kind == "rule":
            blob = wire.encode(MsgType.RULE_INSTALL, target.encode(), rng.bytes(96))
            self.tap.inject(switch_node_name(target), Segment.ALPHA, blob)
        elif kind == "retarget_rule":
            caps = self.tap.captures(MsgType.RULE_INSTALL)
            victim = [c for c in caps if c.dst != switch_node_name(target)]
            if victim:
                _, (_, sealed) = wire.decode(victim[0].data, MsgType.RULE_INSTALL, 2)
                self.tap.inject(switch_node_name(target), Segment.ALPHA, wire.encode(MsgType.RULE_INSTALL, target.encode(), sealed))
        elif kind == "grant":
            # a well-formed grant for real endpoints, signed by the adversary
            nodes = self.nc.ct_nodes
            a, b = target.split(",") if "," in target else sorted(nodes)[:2]
            fk = FlowKey(a, b, 40000, 443)
            adv = crypto.generate_keypair(crypto.KeyOwner.CONTROLLER, rng)
            key = crypto.generate_symmetric_key(crypto.KeyRole.FLOW_PSK, rng)
            grant = make_psk_grant(fk, 0, key, ((a, nodes[a].public_key), (b, nodes[b].public_key)), adv.secret, rng)
            self.tap.inject(ct_node_name(a), Segment.ALPHA, grant.encode())
        elif kind == "packet_in":
            blob = wire.encode(MsgType.PACKET_IN, target.encode(), rng.bytes(120))
            self.tap.inject(self.nc.name, Segment.ALPHA, blob)
        elif kind == "beta":
            src, dst = (target.split(",") + [""])[:2]
            body = crypto.Ciphertext(rng.bytes(12), rng.bytes(80), rng.bytes(32))
            frame = BetaFrame(src, dst, self.nc.view.domains["d1"].epoch if "d1" in self.nc.view.domains else 0, body)
            self.tap.inject(switch_node_name(dst), Segment.BETA, frame.encode())
        self.outcomes[f"forge.{kind}"] = "injected"

    def _sybil(self, item: dict) -> None:
        code = SWITCH_CODE if item.get("code") == "@legit" else item["code"].encode("latin-1")
        sid = item.get("id") or f"sybil-{len([k for k in self.outcomes if k.startswith('sybil.')])}"
        before = set(self.nc.view.switches)
        platform = self.platforms[item["platform"]]
        platform.redirect_target = item.get("redirect_to")
        try:
            self.nc.deploy_and_enroll_switch(platform, code, b"", item.get("domain", "d1"), sid)
            result = "Enrolled"
        except EnrollmentRejected as exc:
            result = exc.verdict.value
        except TransportError:
            result = "TransportError"
        finally:
            platform.redirect_target = None
        self.outcomes[f"sybil.{sid}"] = result
        self.outcomes[f"sybil.{sid}.view_unchanged"] = set(self.nc.view.switches) == before

    def _cuckoo(self, item: dict) -> None:
        victim, malicious = self.platforms[item["victim"]], self.platforms[item["malicious"]]
        if self.cuckoo_list is None:
            raise TopologyError("cuckoo scenario needs anti_cuckoo enabled")
        victim.redirect_target = malicious.id
        try:
            self.outcomes["cuckoo.check"] = anti_cuckoo_check(self.nc.verifier, victim, self.cuckoo_list)
            sid = item.get("id", "cuckoo-switch")
            try:
                self.nc.deploy_and_enroll_switch(victim, SWITCH_CODE, b"", item.get("domain", "d1"), sid)
                self.outcomes["cuckoo.defense_on"] = "Enrolled"
            except EnrollmentRejected as exc:
                self.outcomes["cuckoo.defense_on"] = exc.verdict.value
            # the same attestation without the list: measurement and signature alone
            eid = victim.bootstrap(EnclaveKind.SWITCH, SWITCH_CODE, self.nc.image_config(b""))
            expected = self.nc._expected(EnclaveKind.SWITCH, SWITCH_CODE, b"")
            result = attest_enclave(
                self.nc.verifier, victim, eid, expected, PseudonymBase.random(self.rng), exchange=self.net.exchanger(Segment.ALPHA)
            )
            self.outcomes["cuckoo.defense_off"] = result.verdict.value
            mirror = malicious.enclave(malicious.mirror(EnclaveKind.SWITCH, SWITCH_CODE, self.nc.image_config(b"")))
            self.outcomes["cuckoo.key_is_attackers"] = result.enclave_pk == mirror.public_key
            relisted = publish_platform_list(self.vp, [*self._listed(), malicious])
            self.outcomes["cuckoo.relisted_check"] = anti_cuckoo_check(self.nc.verifier, victim, relisted)
        finally:
            victim.redirect_target = None

    def _listed(self) -> list[Platform]:
        return [self.platforms[p["id"]] for p in self.s.topology["platforms"] if p.get("listed", True)]

    # traffic -------------------------------------------------------------------

    def start_flows(self) -> None:
        for spec in self.s.topology.get("flows", []):
            count, start, gap = int(spec.get("count", 1)), int(spec.get("start", 1)), int(spec.get("gap", 2))
            for i in range(count):
                fr = FlowRun(spec["src"], spec["dst"], Mode(spec.get("mode", "psk")), b"")
                fr.payload = b"payload:" + self.rng.bytes(int(spec.get("payload_bytes", 48)))
                self.sent_payloads.add(fr.payload)
                self.flows.append(fr)
                self.net.schedule_at(start + i * gap, lambda fr=fr: self._open(fr))

    def _open(self, fr: FlowRun) -> None:
        node = self.nc.ct_nodes.get(fr.src)
        if node is None:
            self.net.record("runner", "flow_skipped", fr.src)
            return
        fr.flow = node.ct_open_flow(fr.dst, fr.payload, mode=fr.mode)

    # assertions ------------------------------------------------------------------

    def _session(self, ct: str, flow):
        node = self.nc.ct_nodes.get(ct)
        if node is None or flow is None:
            return None
        return node.enclave_state()["sessions"].get(flow.canonical())

    def _received(self) -> list[tuple[FlowRun, list[bytes]]]:
        out = []
        for fr in self.flows:
            sess = self._session(fr.dst, fr.flow)
            out.append((fr, list(sess.received) if sess else []))
        return out

    def check(self, a) -> tuple[bool, str]:
        name = a if isinstance(a, str) else a["check"]
        args = {} if isinstance(a, str) else a
        if name == "enrollment_gate":
            problems = self.nc.view.problems(self.nc.verdicts)
            return not problems, "; ".join(problems)
        if name == "no_key_material":
            blob = b"\x00".join(r.data for r in self.tap.recorded)
            hits = [s.hex()[:12] for s in self.secrets if s in blob]
            return not hits, f"{len(hits)} key windows found"
        if name == "no_payload_plaintext":
            blob = b"\x00".join(r.data for r in self.tap.recorded)
            for p in self.sent_payloads:
                for i in range(len(p) - 7):
                    if p[i : i + 8] in blob:
                        return False, f"payload window at {i} visible"
            return True, ""
        if name == "one_psk_per_flow":
            keys = [k.bytes for k in self.nc.psks.values()]
            if len(set(keys)) != len(keys):
                return False, "two flows share a key"
            for node in self.nc.ct_nodes.values():
                for flow, (epoch, key) in node.enclave_state()["psk_store"].items():
                    nc_key = self.nc.psks.get((flow, epoch))
                    if nc_key is None or nc_key.bytes != key.bytes:
                        return False, f"{node.id} holds a key the controller never issued for {flow}"
            return True, ""
        if name == "forged_message_rejection":
            for fr, got in self._received():
                if any(g != fr.payload for g in got) or len(got) > 1:
                    return False, f"unexpected data delivered on {fr.flow}"
            return True, ""
        if name == "fib_integrity":
            for sid, node in self.nc.switch_nodes.items():
                for rule in node.enclave_state()["fib"].rules():
                    if self.nc.issued_rules.get(rule.id) != rule:
                        return False, f"{sid} holds rule {rule.id} the controller never issued"
            return True, ""
        if name == "flows_established":
            bad = [str(fr.flow) for fr in self.flows if not self._both_established(fr)]
            return not bad, f"{len(bad)} flows not established"
        if name == "min_established":
            n = sum(self._both_established(fr) for fr in self.flows)
            want = int(args.get("min", 0))
            return n >= want, f"{n} established, wanted {want}"
        if name == "payloads_delivered":
            bad = [fr for fr, got in self._received() if got != [fr.payload]]
            return not bad, f"{len(bad)} flows missing payload"
        if name == "event":
            evs = self.net.events_of(args["kind"], args.get("source"))
            lo, hi = int(args.get("min", 1)), args.get("max")
            return len(evs) >= lo and (hi is None or len(evs) <= int(hi)), f"{len(evs)} {args['kind']} events"
        if name == "outcome":
            got = self.outcomes.get(args["key"], "<missing>")
            return got == args["equals"], f"{args['key']} = {got!r}"
        if name == "verdict":
            got = self.nc.verdicts.get(args["component"])
            got = got.value if got else "<none>"
            return got == args["equals"], f"verdict {got}"
        if name == "not_enrolled":
            cid = args["component"]
            return cid not in self.nc.view.switches and cid not in self.nc.view.compute_tasks, f"{cid} in view"
        raise ParseError(f"unknown assertion {name!r}")

    def _both_established(self, fr: FlowRun) -> bool:
        a, b = self._session(fr.src, fr.flow), self._session(fr.dst, fr.flow)
        return bool(a and b and a.established and b.established)

    def metrics(self) -> dict[str, int]:
        m = {f"net.{k}": v for k, v in self.net.counters.items()}
        m.update({f"nc.{k}": v for k, v in self.nc.counters.items()})
        for sid, node in self.nc.switch_nodes.items():
            m.update({f"{sid}.{k}": v for k, v in node.metrics().items()})
        m["flows"] = len(self.flows)
        m["flows_established"] = sum(self._both_established(fr) for fr in self.flows)
        m["transcript_messages"] = len(self.tap.recorded)
        m["injected"] = self.tap.injected
        return dict(sorted(m.items()))


def run_scenario(s: Scenario, seed: Optional[int] = None) -> ScenarioReport:
    seed = s.seed if seed is None else seed
    run = _Run(s, seed)
    run.build()
    run.arm()
    run.start_flows()
    run.net.run(int(s.topology.get("max_ticks", MAX_TICKS)))
    passed, details = {}, {}
    expanded = []
    for a in s.assertions:
        expanded.extend(SAFETY if a == "safety" else [a])
    for a in expanded:
        label = _assertion_label(a)
        ok, why = run.check(a)
        passed[label] = ok
        if why:
            details[label] = why
    return ScenarioReport(s.name, seed, passed, run.tap.digest(), run.metrics(), details)


def _header_mutator(which: str) -> Callable[[bytes], bytes]:
    """Rewrites a header field of a BETA_FRAME while leaving the body intact."""

    def mutate(data: bytes) -> bytes:
        try:
            frame = BetaFrame.decode(data)
        except Exception:
            return data
        if which == "dst_switch":
            frame = BetaFrame(frame.src_switch, frame.src_switch, frame.epoch, frame.body)
        elif which == "src_switch":
            frame = BetaFrame(frame.dst_switch, frame.dst_switch, frame.epoch, frame.body)
        elif which == "epoch":
            frame = BetaFrame(frame.src_switch, frame.dst_switch, frame.epoch + 1, frame.body)
        return frame.encode()

    return mutate


def bundled_scenarios() -> dict[str, Path]:
    root = Path(__file__).with_name("scenarios")
    return {p.stem: p for p in sorted(root.glob("*.json"))}
