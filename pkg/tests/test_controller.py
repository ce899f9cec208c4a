import pytest

from conftest import CT_CODE, SW_CODE, build_testbed
from trusdn import crypto, wire
from trusdn.attestation import Verdict
from trusdn.crypto import Ciphertext, DeterministicRandom, KeyOwner, KeyRole
from trusdn.errors import AuthenticationFailure, DecryptionFailure, EnrollmentRejected, NoSuchSwitch, WrongKeyRole
from trusdn.flows import ActionKind, FlowKey, Packet
from trusdn.messages import EnrollmentMessage, build_enrollment_message, open_enrollment_message
from trusdn.sim import Segment
from trusdn.switch import PACKET_IN_AAD
from trusdn.wire import MsgType


def seal_packet_in(tb, sid, flow, seq=0):
    st = tb.sw(sid).enclave_state()
    return crypto.sym_seal(st["k_alpha"], Packet(flow, b"hello", seq).encode(), aad=PACKET_IN_AAD + sid.encode(), sender=b"test")


# -- enrollment ---------------------------------------------------------------------


def test_switch_enrollment_updates_view(testbed):
    nc = testbed.nc
    assert set(nc.view.switches) == {"s1", "s2"}
    assert nc.verdicts["s1"] is Verdict.ACCEPTED
    assert "sw:s1" in nc.view.nodes() and "host:h1" in nc.view.nodes()
    assert nc.view.problems(nc.verdicts) == []


def test_tampered_switch_code_rejected(testbed):
    nc = testbed.nc
    before = (set(nc.view.switches), {k: set(v) for k, v in nc.view.links.items()})
    with pytest.raises(EnrollmentRejected) as exc:
        nc.deploy_and_enroll_switch(testbed.platforms["h1"], SW_CODE + b"!", b"", "d1", "bad")
    assert exc.value.verdict is Verdict.MEASUREMENT_MISMATCH
    assert (set(nc.view.switches), {k: set(v) for k, v in nc.view.links.items()}) == before
    assert "bad" not in nc.view.domains["d1"].members


def test_host_malware_patch_rejected(testbed):
    plat = testbed.platforms["h2"]
    plat.code_filter = lambda code: code.replace(b"image", b"imagf")
    with pytest.raises(EnrollmentRejected):
        testbed.nc.deploy_and_enroll_switch(plat, SW_CODE, b"", "d1", "patched")


def test_domain_members_share_k_beta(testbed):
    a, b = testbed.sw("s1").enclave_state(), testbed.sw("s2").enclave_state()
    assert a["epoch"] == b["epoch"] == 0
    assert a["beta_keys"][0].bytes == b["beta_keys"][0].bytes
    assert a["k_alpha"].bytes != b["k_alpha"].bytes
    assert a["members"] == b["members"] == ["s1", "s2"]


def test_second_domain_gets_its_own_key():
    tb = build_testbed(third_domain=True)
    assert tb.sw("s3").enclave_state()["beta_keys"][0].bytes != tb.sw("s1").enclave_state()["beta_keys"][0].bytes


def test_ct_enrollment(testbed):
    nc = testbed.nc
    rec = nc.view.compute_tasks["c1"]
    assert rec.ck_pk == testbed.ct("c1").public_key and rec.switch == "s1"
    assert "k_alpha" in testbed.ct("c1").enclave_state()


def test_sybil_ct_rejected(testbed):
    with pytest.raises(EnrollmentRejected):
        testbed.nc.deploy_and_enroll_ct(testbed.platforms["h1"], b"unknown code", b"", "s1", "cx")
    assert "cx" not in testbed.nc.view.compute_tasks


def test_ct_without_switch(testbed):
    plat = testbed.authority.new_platform("h9")
    with pytest.raises(NoSuchSwitch):
        testbed.nc.deploy_and_enroll_ct(plat, CT_CODE, b"", "s1")
    with pytest.raises(NoSuchSwitch):
        testbed.nc.deploy_and_enroll_ct(testbed.platforms["h1"], CT_CODE, b"", "nope")


# -- enrollment message ---------------------------------------------------------------


@pytest.fixture
def ek():
    return crypto.generate_keypair(KeyOwner.ENCLAVE, DeterministicRandom(11))


def _keys(rng):
    return crypto.generate_symmetric_key(KeyRole.SESSION_ALPHA, rng), crypto.generate_symmetric_key(KeyRole.DOMAIN_BETA, rng)


def test_enrollment_message_round_trip(ek):
    rng = DeterministicRandom(1)
    ka, kb = _keys(rng)
    msg = EnrollmentMessage.decode(build_enrollment_message(ek.public, ka, kb, 3, rng).encode())
    got = open_enrollment_message(ek.secret, msg)
    assert got.k_alpha == ka and got.k_beta == kb and got.epoch == 3


def test_enrollment_message_wrong_key(ek):
    rng = DeterministicRandom(1)
    ka, kb = _keys(rng)
    other = crypto.generate_keypair(KeyOwner.ENCLAVE, DeterministicRandom(12))
    with pytest.raises(DecryptionFailure):
        open_enrollment_message(other.secret, build_enrollment_message(ek.public, ka, kb, 0, rng))


def test_enrollment_body_bit_flips_fail_mac(ek, monkeypatch):
    rng = DeterministicRandom(1)
    ka, kb = _keys(rng)
    msg = build_enrollment_message(ek.public, ka, kb, 0, rng)
    opened = []
    real_open = crypto.sym_open
    monkeypatch.setattr(crypto, "sym_open", lambda *a, **k: opened.append(1) or real_open(*a, **k))
    raw = msg.body.to_bytes()
    for bit in range(0, len(raw) * 8, 5):
        buf = bytearray(raw)
        buf[bit // 8] ^= 1 << (bit % 8)
        bad = EnrollmentMessage(Ciphertext.from_bytes(bytes(buf)), msg.tag, msg.wrapped)
        with pytest.raises(AuthenticationFailure, match="MAC"):
            open_enrollment_message(ek.secret, bad)
    assert opened == []  # the body was never decrypted


def test_enrollment_key_roles(ek):
    rng = DeterministicRandom(1)
    ka, kb = _keys(rng)
    with pytest.raises(WrongKeyRole):
        build_enrollment_message(ek.public, kb, kb, 0, rng)
    with pytest.raises(WrongKeyRole):
        build_enrollment_message(ek.public, ka, ka, 0, rng)
    assert open_enrollment_message(ek.secret, build_enrollment_message(ek.public, ka, None, 0, rng)).k_beta is None


# -- packet-in and grants ---------------------------------------------------------------


def test_same_host_packet_in(testbed):
    nc = testbed.nc
    flow = FlowKey("c1", "c2", 50000, 443)
    out = nc.handle_packet_in("s1", seal_packet_in(testbed, "s1", flow))
    kinds = [(dst, wire.peek_type(data)) for dst, _, data in out]
    assert kinds == [("ct:c1", MsgType.PSK_GRANT), ("ct:c2", MsgType.PSK_GRANT), ("sw:s1", MsgType.RULE_INSTALL)]
    stats = nc.flow_stats[flow.canonical()]
    assert (stats["packet_in"], stats["grants"], stats["rule_installs"]) == (1, 1, 1)


def test_cross_host_packet_in_installs_on_both(testbed):
    flow = FlowKey("c1", "c3", 50000, 443)
    out = testbed.nc.handle_packet_in("s1", seal_packet_in(testbed, "s1", flow))
    rules = [dst for dst, _, data in out if wire.peek_type(data) is MsgType.RULE_INSTALL]
    assert rules == ["sw:s2", "sw:s1"]  # far switch first


def test_duplicate_packet_in_suppressed(testbed):
    nc = testbed.nc
    flow = FlowKey("c1", "c2", 50000, 443)
    assert nc.handle_packet_in("s1", seal_packet_in(testbed, "s1", flow))
    assert nc.handle_packet_in("s1", seal_packet_in(testbed, "s1", flow, 1)) == []
    assert nc.handle_packet_in("s1", seal_packet_in(testbed, "s1", flow.reversed())) == []
    stats = nc.flow_stats[flow.canonical()]
    assert stats["grants"] == 1 and stats["suppressed"] == 2


def test_packet_in_from_wrong_switch_is_spoofed(testbed):
    flow = FlowKey("c1", "c3", 50000, 443)
    assert testbed.nc.handle_packet_in("s2", seal_packet_in(testbed, "s2", flow)) == []
    assert testbed.net.events_of("spoofed_source")
    assert flow.canonical() not in testbed.nc.granted


def test_packet_in_authentication(testbed):
    flow = FlowKey("c1", "c2", 50000, 443)
    sealed = seal_packet_in(testbed, "s1", flow)
    with pytest.raises(AuthenticationFailure):
        testbed.nc.handle_packet_in("s2", sealed)
    with pytest.raises(AuthenticationFailure):
        testbed.nc.handle_packet_in("ghost", sealed)


def test_unknown_destination_gets_drop(testbed):
    nc = testbed.nc
    flow = FlowKey("c1", "nobody", 50000, 443)
    out = nc.handle_packet_in("s1", seal_packet_in(testbed, "s1", flow))
    assert [wire.peek_type(d) for _, _, d in out] == [MsgType.RULE_INSTALL]
    (rule,) = [r for r in nc.issued_rules.values() if r.match.dst == "nobody"]
    assert rule.action.kind is ActionKind.DROP
    assert testbed.net.events_of("unknown_endpoint")


def test_cross_domain_flow_dropped():
    tb = build_testbed(third_domain=True)
    flow = FlowKey("c1", "c4", 50000, 443)
    out = tb.nc.handle_packet_in("s1", seal_packet_in(tb, "s1", flow))
    rules = [r for r in tb.nc.issued_rules.values() if r.match.dst == "c4"]
    assert [r.action.kind for r in rules] == [ActionKind.DROP]
    assert sum(wire.peek_type(d) is MsgType.PSK_GRANT for _, _, d in out) == 2


def test_baseline_mode_sends_no_grants(baseline_testbed):
    flow = FlowKey("c1", "c2", 50000, 443)
    out = baseline_testbed.nc.handle_packet_in("s1", seal_packet_in(baseline_testbed, "s1", flow))
    assert [wire.peek_type(d) for _, _, d in out] == [MsgType.RULE_INSTALL]


def test_flow_psks_distinct_and_32_bytes(testbed):
    nc = testbed.nc
    a = nc.generate_flow_psk(FlowKey("c1", "c2", 1, 2))
    b = nc.generate_flow_psk(FlowKey("c1", "c2", 3, 2))
    assert a.bytes != b.bytes and len(a.bytes) == 32 and a.role is KeyRole.FLOW_PSK


def test_nc_copy_equals_endpoint_copies(testbed):
    flow = testbed.open("c1", "c3", b"data")
    testbed.net.run()
    nc_key = testbed.nc.grant_for(flow)
    for ct in ("c1", "c3"):
        epoch, key = testbed.ct(ct).enclave_state()["psk_store"][flow.canonical()]
        assert key.bytes == nc_key.bytes and epoch == testbed.nc.flow_epoch


def test_flush_flows_reissues(testbed):
    nc = testbed.nc
    flow = FlowKey("c1", "c2", 50000, 443)
    nc.handle_packet_in("s1", seal_packet_in(testbed, "s1", flow))
    nc.flush_flows()
    assert len(testbed.sw("s1").enclave_state()["fib"]) == 0
    assert nc.handle_packet_in("s1", seal_packet_in(testbed, "s1", flow, 1))
    assert nc.grant_for(flow, 0).bytes != nc.grant_for(flow, 1).bytes


def test_malformed_controller_input_recorded(testbed):
    nc, net = testbed.nc, testbed.net
    net.send("sw:s1", "nc", Segment.ALPHA, b"\x00garbage")
    net.send("sw:s1", "nc", Segment.ALPHA, wire.encode(MsgType.PACKET_IN, b"s1", b"x" * 80))
    net.send("sw:s1", "nc", Segment.ALPHA, wire.encode(MsgType.HELLO, b"x"))
    net.run()
    assert net.events_of("malformed") and net.events_of("packet_in_rejected") and net.events_of("unexpected_message")


# -- domain key rotation ------------------------------------------------------------------


def test_rotation_reaches_all_members(testbed):
    epoch = testbed.nc.rotate_domain_key("d1")
    testbed.net.run()
    a, b = testbed.sw("s1").enclave_state(), testbed.sw("s2").enclave_state()
    assert epoch == 1 and a["epoch"] == b["epoch"] == 1
    assert a["beta_keys"][1].bytes == b["beta_keys"][1].bytes == testbed.nc.view.domains["d1"].k_beta.bytes
    assert a["beta_keys"][0].bytes != a["beta_keys"][1].bytes


def test_traffic_survives_rotation(testbed):
    f1 = testbed.open("c1", "c3", b"before")
    testbed.net.run()
    testbed.nc.rotate_domain_key("d1")
    testbed.net.run()
    f2 = testbed.open("c1", "c3", b"after")
    testbed.net.run()
    assert testbed.ct("c3").secure_recv(f1) == [b"before"]
    assert testbed.ct("c3").secure_recv(f2) == [b"after"]


def test_new_switch_joins_existing_domain(testbed):
    plat = testbed.dc.add(testbed.authority.new_platform("h4"))
    testbed.nc.deploy_and_enroll_switch(plat, SW_CODE, b"", "d1", "s4")
    states = [testbed.sw(s).enclave_state() for s in ("s1", "s2", "s4")]
    assert all(st["members"] == ["s1", "s2", "s4"] for st in states)
    assert len({st["beta_keys"][0].bytes for st in states}) == 1
