import sys
from dataclasses import dataclass, field
from pathlib import Path

import pytest
from hypothesis import settings

from trusdn.attestation import EpidAuthority, Verifier
from trusdn.controller import Controller
from trusdn.crypto import DeterministicRandom
from trusdn.enclave import Datacenter, EnclaveKind
from trusdn.endpoint import Mode
from trusdn.sim import Network

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

SW_CODE = b"test switch image"
CT_CODE = b"test compute task image"


@dataclass
class Testbed:
    net: Network
    nc: Controller
    authority: EpidAuthority
    dc: Datacenter
    rng: DeterministicRandom
    mode: Mode
    platforms: dict = field(default_factory=dict)

    def ct(self, cid):
        return self.nc.ct_nodes[cid]

    def sw(self, sid):
        return self.nc.switch_nodes[sid]

    def open(self, src, dst, payload=b"", **kw):
        kw.setdefault("mode", self.mode)
        return self.ct(src).ct_open_flow(dst, payload, **kw)


def build_testbed(seed=1, psk=True, tap=None, third_domain=False) -> Testbed:
    """h1: s1 with c1, c2.  h2: s2 with c3.  s1 and s2 share domain d1.
    With ``third_domain``, h3 carries s3 (domain d2) with c4."""
    rng = DeterministicRandom(seed)
    authority = EpidAuthority(rng.fork("authority"))
    dc = Datacenter()
    net = Network(tap)
    verifier = Verifier("nc", authority.group, rng.fork("verifier"), root_pk=authority.root_pk, clock=net.now)
    nc = Controller(net, rng.fork("nc"), verifier, psk_mode=psk)
    nc.approve_image(EnclaveKind.SWITCH, SW_CODE, b"")
    nc.approve_image(EnclaveKind.COMPUTE_TASK, CT_CODE, b"")
    tb = Testbed(net, nc, authority, dc, rng, Mode.PSK if psk else Mode.BASELINE)
    hosts = ["h1", "h2"] + (["h3"] if third_domain else [])
    for h in hosts:
        tb.platforms[h] = dc.add(authority.new_platform(h))
    nc.deploy_and_enroll_switch(tb.platforms["h1"], SW_CODE, b"", "d1", "s1")
    nc.deploy_and_enroll_switch(tb.platforms["h2"], SW_CODE, b"", "d1", "s2")
    nc.deploy_and_enroll_ct(tb.platforms["h1"], CT_CODE, b"", "s1", "c1")
    nc.deploy_and_enroll_ct(tb.platforms["h1"], CT_CODE, b"", "s1", "c2")
    nc.deploy_and_enroll_ct(tb.platforms["h2"], CT_CODE, b"", "s2", "c3")
    if third_domain:
        nc.deploy_and_enroll_switch(tb.platforms["h3"], SW_CODE, b"", "d2", "s3")
        nc.deploy_and_enroll_ct(tb.platforms["h3"], CT_CODE, b"", "s3", "c4")
    nodes = list(nc.ct_nodes.values())
    for a in nodes:
        for b in nodes:
            if a is not b:
                a.learn_peer(b.id, b.public_key)
    return tb


@pytest.fixture
def testbed():
    return build_testbed()


@pytest.fixture
def baseline_testbed():
    return build_testbed(psk=False)


@pytest.fixture
def rng():
    return DeterministicRandom(1234)
