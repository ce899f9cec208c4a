"""Attestation fixtures and quote-corruption helpers shared by the tests."""

from __future__ import annotations

from dataclasses import dataclass, replace

from trusdn import wire
from trusdn.attestation import EpidAuthority, Verifier
from trusdn.crypto import DeterministicRandom, LinkableSignature, MacTag, PseudonymBase
from trusdn.enclave import Datacenter, EnclaveKind, Measurement, Quote, Report, measure
from trusdn.wire import MsgType

CODE = b"attested image"
FIELDS = ("measurement", "nonce", "user_data", "signature", "report_mac")


@dataclass
class AttestWorld:
    authority: EpidAuthority
    dc: Datacenter
    platform: object
    verifier: Verifier
    eid: str
    expected: Measurement
    rng: DeterministicRandom

    def base(self):
        return PseudonymBase.random(self.rng)


def attest_world(seed=1, code=CODE, platforms=1) -> AttestWorld:
    rng = DeterministicRandom(seed)
    authority = EpidAuthority(rng.fork("authority"))
    dc = Datacenter()
    plats = [dc.add(authority.new_platform(f"p{i}")) for i in range(platforms)]
    verifier = Verifier("v", authority.group, rng.fork("verifier"), root_pk=authority.root_pk)
    eid = plats[0].create_enclave(EnclaveKind.SWITCH, code, b"")
    return AttestWorld(authority, dc, plats[0], verifier, eid, measure(EnclaveKind.SWITCH, CODE, b""), rng.fork("bases"))


def _xor(data: bytes, index: int) -> bytes:
    buf = bytearray(data)
    buf[index] ^= 0x01
    return bytes(buf)


def field_width(field: str) -> int:
    return 96 if field == "signature" else 32


def corrupt_quote(q: Quote, field: str, index: int) -> Quote:
    rep, sig = q.report, q.signature
    if field == "measurement":
        rep = replace(rep, reporter_measurement=Measurement(_xor(rep.reporter_measurement.digest, index)))
    elif field == "user_data":
        rep = replace(rep, user_data=_xor(rep.user_data, index))
    elif field == "report_mac":
        rep = replace(rep, mac=MacTag(_xor(rep.mac.bytes, index)))
    elif field == "nonce":
        return Quote(rep, _xor(q.challenge_nonce, index), sig)
    elif field == "signature":
        if index < 32:
            sig = replace(sig, pseudonym=_xor(sig.pseudonym, index))
        else:
            sig = replace(sig, proof=_xor(sig.proof, index - 32))
    else:
        raise ValueError(field)
    if rep is not q.report:
        # a quote carries the signed message implicitly: report || nonce
        sig = LinkableSignature(sig.pseudonym, sig.base, sig.proof, Quote.signed_message(rep, q.challenge_nonce), sig.group_id)
    return Quote(rep, q.challenge_nonce, sig)


def corrupting_exchange(field: str, index: int):
    """Network adversary rewriting one byte of one quote field in transit."""

    def exchange(src, dst, data):
        if wire.peek_type(data) is not MsgType.QUOTE:
            return data
        _, (qb, pk) = wire.decode(data, MsgType.QUOTE, 2)
        bad = corrupt_quote(Quote.from_bytes(qb), field, index)
        return wire.encode(MsgType.QUOTE, bad.to_bytes(), pk)

    return exchange


def corrupt_report_before_qe(platform, field: str, index: int):
    """Host malware altering the local report on its way to the quoting enclave."""
    original = platform.qe_quote

    def qe_quote(report: Report, nonce, base, credential=None):
        if field == "measurement":
            report = replace(report, reporter_measurement=Measurement(_xor(report.reporter_measurement.digest, index)))
        elif field == "user_data":
            report = replace(report, user_data=_xor(report.user_data, index))
        elif field == "report_mac":
            report = replace(report, mac=MacTag(_xor(report.mac.bytes, index)))
        elif field == "nonce":
            nonce = _xor(nonce, index)
        return original(report, nonce, base, credential)

    platform.qe_quote = qe_quote
    return lambda: setattr(platform, "qe_quote", original)
