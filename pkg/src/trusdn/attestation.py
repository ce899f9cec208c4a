"""Remote attestation of enclaves and the named-base cuckoo-attack defense.

The verifier challenges a platform with a fresh nonce, the enclave reports to
the platform's quoting enclave with ``hash(public key)`` as user data, the QE
signs, and the verifier checks signature, nonce, user data and measurement.

For the cuckoo defense, a provider verifier that holds a certificate from the
group authority signs up its platforms under one named base and publishes the
resulting pseudonyms.  A tenant authorised for the same base name asks a
platform for a fresh signature and accepts only if it links to a published
entry.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Collection, Optional, Union

from . import crypto, wire
from .crypto import (
    DeterministicRandom,
    GroupParams,
    KeyOwner,
    KeyPair,
    LinkableSignature,
    PseudonymBase,
)
from .enclave import Measurement, Platform, Quote
from .errors import (
    CryptoError,
    PlatformError,
    UnauthorizedVerifier,
    UnverifiedInput,
    WireFormatError,
)
from .wire import MsgType

log = logging.getLogger(__name__)

FRESHNESS_WINDOW = 64
PLATFORM_ATTEST_PREFIX = b"TruSDN-platform-attest"
FOREVER = 2**62


class Verdict(enum.Enum):
    ACCEPTED = "Accepted"
    MEASUREMENT_MISMATCH = "MeasurementMismatch"
    BAD_SIGNATURE = "BadSignature"
    STALE_NONCE = "StaleNonce"
    USER_DATA_MISMATCH = "UserDataMismatch"
    CUCKOO_SUSPECTED = "CuckooSuspected"


@dataclass(frozen=True)
class Challenge:
    nonce: bytes
    qe_identity: str
    issued_at: int


@dataclass(frozen=True)
class AttestationResult:
    verdict: Verdict
    enclave_pk: Optional[bytes]
    quote: Optional[Quote]

    def __post_init__(self):
        if (self.enclave_pk is not None) != (self.verdict is Verdict.ACCEPTED):
            raise ValueError("enclave_pk must be present iff the verdict is Accepted")

    @property
    def accepted(self) -> bool:
        return self.verdict is Verdict.ACCEPTED


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VerifierCertificate:
    subject: str
    issuer: str
    pk: bytes
    signature: crypto.Signature
    base_name: Optional[str] = None
    is_ca: bool = False
    valid_from: int = 0
    valid_until: int = FOREVER

    def tbs(self) -> bytes:
        return wire.pack_fields(
            self.subject.encode(),
            self.issuer.encode(),
            self.pk,
            (self.base_name or "").encode(),
            bytes([self.is_ca]),
            wire.u64(self.valid_from),
            wire.u64(self.valid_until),
        )

    def to_dict(self) -> dict:
        return {
            "subject": self.subject,
            "issuer": self.issuer,
            "pk": self.pk.hex(),
            "base_name": self.base_name,
            "is_ca": self.is_ca,
            "valid_from": self.valid_from,
            "valid_until": self.valid_until,
            "signature": self.signature.bytes.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerifierCertificate":
        return cls(
            subject=d["subject"],
            issuer=d["issuer"],
            pk=bytes.fromhex(d["pk"]),
            signature=crypto.Signature(bytes.fromhex(d["signature"])),
            base_name=d.get("base_name"),
            is_ca=bool(d.get("is_ca", False)),
            valid_from=int(d.get("valid_from", 0)),
            valid_until=int(d.get("valid_until", FOREVER)),
        )


def validate_chain(chain, root_pk: bytes, now: Optional[int] = None) -> bool:
    """Validate a leaf-first certificate chain up to the trust anchor ``root_pk``."""
    if not chain:
        return False
    for i, cert in enumerate(chain):
        if now is not None and not cert.valid_from <= now <= cert.valid_until:
            return False
        if i + 1 < len(chain):
            parent = chain[i + 1]
            if not parent.is_ca or parent.subject != cert.issuer:
                return False
            issuer_pk = parent.pk
        else:
            issuer_pk = root_pk
        if not crypto.verify(issuer_pk, cert.tbs(), cert.signature):
            return False
    return True


class EpidAuthority:
    """Group issuer and root CA.  Join is reduced to handing out member
    secrets; revocation is not modelled."""

    def __init__(self, rng: DeterministicRandom, name: str = "epid-authority", group_id: str = "trusdn-epid-group"):
        self.name = name
        self.rng = rng
        self.group = GroupParams(group_id)
        self.keypair = crypto.generate_keypair(KeyOwner.AUTHORITY, rng)
        self.credential: list[VerifierCertificate] = []

    @property
    def root_pk(self) -> bytes:
        return self.keypair.public

    def join(self) -> crypto.GroupMemberSecret:
        return crypto.generate_member_secret(self.group, self.rng)

    def named_base_policy(self, base: PseudonymBase, credential) -> bool:
        """QE-side rule: a named base may only be used by a verifier holding a
        certificate for that name which chains to this authority."""
        if not credential:
            return False
        return credential[0].base_name == base.name and validate_chain(credential, self.root_pk)

    def new_platform(self, pid: str, *, honest: bool = True, rng: Optional[DeterministicRandom] = None) -> Platform:
        return Platform(
            pid,
            rng or self.rng.fork(f"platform:{pid}"),
            self.join(),
            honest=honest,
            named_base_policy=self.named_base_policy,
        )


def issue_verifier_certificate(
    authority,
    subject_name: str,
    subject_pk: bytes,
    *,
    base_name: Optional[str] = None,
    is_ca: bool = False,
    valid_from: int = 0,
    valid_until: int = FOREVER,
) -> VerifierCertificate:
    """Sign a verifier certificate with ``authority``'s key (the root, or an
    intermediate such as the provider verifier)."""
    unsigned = VerifierCertificate(
        subject_name, authority.name, subject_pk, crypto.Signature(b""), base_name, is_ca, valid_from, valid_until
    )
    sig = crypto.sign(authority.keypair.secret, unsigned.tbs())
    return VerifierCertificate(
        subject_name, authority.name, subject_pk, sig, base_name, is_ca, valid_from, valid_until
    )


# ---------------------------------------------------------------------------
# verifier and attestation
# ---------------------------------------------------------------------------


class Verifier:
    def __init__(
        self,
        name: str,
        group: GroupParams,
        rng: DeterministicRandom,
        *,
        root_pk: Optional[bytes] = None,
        clock: Callable[[], int] = lambda: 0,
        freshness_window: int = FRESHNESS_WINDOW,
        keypair: Optional[KeyPair] = None,
    ):
        self.name = name
        self.group = group
        self.rng = rng
        self.root_pk = root_pk
        self.clock = clock
        self.freshness_window = freshness_window
        self.keypair = keypair or crypto.generate_keypair(KeyOwner.VERIFIER, rng)
        self.credential: list[VerifierCertificate] = []
        self._outstanding: dict[bytes, Challenge] = {}

    @property
    def authorized_base(self) -> Optional[str]:
        if not self.credential or self.root_pk is None:
            return None
        if not validate_chain(self.credential, self.root_pk, self.clock()):
            return None
        return self.credential[0].base_name

    def issue_challenge(self, qe_identity: str) -> Challenge:
        while True:
            nonce = self.rng.bytes(32)
            if nonce not in self._outstanding:
                break
        ch = Challenge(nonce, qe_identity, self.clock())
        self._outstanding[nonce] = ch
        return ch

    def consume(self, challenge: Challenge, nonce: bytes) -> bool:
        """True iff ``nonce`` answers ``challenge`` inside the freshness
        window.  The challenge is single use either way."""
        self._outstanding.pop(challenge.nonce, None)
        if not crypto.ct_equal(nonce, challenge.nonce):
            return False
        return self.clock() - challenge.issued_at <= self.freshness_window


def _encode_credential(credential) -> bytes:
    return json.dumps([c.to_dict() for c in credential or []], sort_keys=True).encode()


def _decode_credential(data: bytes):
    try:
        return [VerifierCertificate.from_dict(d) for d in json.loads(data.decode())]
    except (ValueError, KeyError, TypeError) as exc:
        raise WireFormatError(f"bad credential: {exc}") from None


def encode_challenge(ch: Challenge, enclave_id: str, base: PseudonymBase, credential) -> bytes:
    return wire.encode(
        MsgType.CHALLENGE, ch.nonce, ch.qe_identity.encode(), enclave_id.encode(), base.encode(), _encode_credential(credential)
    )


def platform_answer(platform: Platform, challenge_frame: bytes) -> bytes:
    """Host-side handler: decode a challenge frame and reply with a QUOTE frame."""
    _, (nonce, _qe, eid, base, cred) = wire.decode(challenge_frame, MsgType.CHALLENGE, 5)
    quote, pk = platform.answer_challenge(eid.decode(), nonce, PseudonymBase.decode(base), _decode_credential(cred))
    return wire.encode(MsgType.QUOTE, quote.to_bytes(), pk)


def _identity(src, dst, data):
    return data


def attest_enclave(
    verifier: Verifier,
    platform: Platform,
    enclave: str,
    expected: Union[Measurement, Collection[Measurement]],
    base: PseudonymBase,
    *,
    exchange: Callable[[str, str, bytes], bytes] = _identity,
    cuckoo_list: Optional["PlatformSignatureList"] = None,
) -> AttestationResult:
    """Challenge -> quote -> verify.  ``exchange(src, dst, frame)`` carries
    each frame across the (adversary-controlled) network and returns what
    arrives."""
    acceptable = [expected] if isinstance(expected, Measurement) else list(expected)
    host = f"host:{platform.id}"
    ch = verifier.issue_challenge(platform.qe_id)
    sent = exchange(verifier.name, host, encode_challenge(ch, enclave, base, verifier.credential))
    try:
        reply = exchange(host, verifier.name, platform_answer(platform, sent))
        _, (quote_bytes, pk) = wire.decode(reply, MsgType.QUOTE, 2)
        quote = Quote.from_bytes(quote_bytes)
    except (WireFormatError, PlatformError, CryptoError, ValueError) as exc:
        log.info("attestation of %s failed before verification: %s", enclave, exc)
        verifier._outstanding.pop(ch.nonce, None)
        return AttestationResult(Verdict.BAD_SIGNATURE, None, None)
    return check_quote(verifier, ch, quote, pk, acceptable, base, cuckoo_list)


def check_quote(verifier, ch, quote, pk, acceptable, base, cuckoo_list=None) -> AttestationResult:
    sig = quote.signature
    # verify under the base the quote names, so that a genuine quote from an
    # earlier session is reported as stale rather than as a bad signature
    if not crypto.epid_verify(verifier.group, sig.base, Quote.signed_message(quote.report, quote.challenge_nonce), sig):
        verifier._outstanding.pop(ch.nonce, None)
        return AttestationResult(Verdict.BAD_SIGNATURE, None, quote)
    if not verifier.consume(ch, quote.challenge_nonce):
        return AttestationResult(Verdict.STALE_NONCE, None, quote)
    if sig.base != base:
        return AttestationResult(Verdict.BAD_SIGNATURE, None, quote)
    if not crypto.ct_equal(quote.report.user_data, hashlib.sha256(pk).digest()):
        return AttestationResult(Verdict.USER_DATA_MISMATCH, None, quote)
    if not any(crypto.ct_equal(quote.report.reporter_measurement.digest, m.digest) for m in acceptable):
        return AttestationResult(Verdict.MEASUREMENT_MISMATCH, None, quote)
    if cuckoo_list is not None and not cuckoo_list.links(sig):
        return AttestationResult(Verdict.CUCKOO_SUSPECTED, None, quote)
    return AttestationResult(Verdict.ACCEPTED, pk, quote)


# ---------------------------------------------------------------------------
# published platform list and the anti-cuckoo check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ListEntry:
    pseudonym: bytes
    proof: bytes
    message: bytes


@dataclass
class PlatformSignatureList:
    base_name: str
    group_id: str
    entries: list[ListEntry]
    publisher: list[VerifierCertificate]
    signature: crypto.Signature = crypto.Signature(b"")
    failures: list[str] = field(default_factory=list, compare=False)

    @property
    def base(self) -> PseudonymBase:
        return PseudonymBase.named(self.base_name)

    def entry_signature(self, entry: ListEntry) -> LinkableSignature:
        return LinkableSignature(entry.pseudonym, self.base, entry.proof, entry.message, self.group_id)

    def signed_bytes(self) -> bytes:
        return wire.pack_fields(
            self.base_name.encode(),
            self.group_id.encode(),
            *(wire.pack_fields(e.pseudonym, e.proof, e.message) for e in self.entries),
        )

    def is_authentic(self, root_pk: bytes) -> bool:
        if not validate_chain(self.publisher, root_pk):
            return False
        if self.publisher[0].base_name != self.base_name:
            return False
        if not crypto.verify(self.publisher[0].pk, self.signed_bytes(), self.signature):
            return False
        group = GroupParams(self.group_id)
        return all(crypto.epid_verify(group, self.base, e.message, self.entry_signature(e)) for e in self.entries)

    def links(self, sig: LinkableSignature) -> bool:
        """True iff ``sig`` links to some entry (same pseudonym, same named base)."""
        for entry in self.entries:
            if entry.pseudonym != sig.pseudonym:
                continue
            try:
                if crypto.epid_linked(sig, self.entry_signature(entry)):
                    return True
            except UnverifiedInput:
                return False
        return False

    def to_json(self) -> str:
        return json.dumps(
            {
                "base_name": self.base_name,
                "group_id": self.group_id,
                "publisher": [c.to_dict() for c in self.publisher],
                "entries": [
                    {"pseudonym": e.pseudonym.hex(), "proof": e.proof.hex(), "message": e.message.hex()}
                    for e in self.entries
                ],
                "signature": self.signature.bytes.hex(),
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "PlatformSignatureList":
        d = json.loads(text)
        return cls(
            base_name=d["base_name"],
            group_id=d["group_id"],
            entries=[
                ListEntry(bytes.fromhex(e["pseudonym"]), bytes.fromhex(e["proof"]), bytes.fromhex(e["message"]))
                for e in d["entries"]
            ],
            publisher=[VerifierCertificate.from_dict(c) for c in d["publisher"]],
            signature=crypto.Signature(bytes.fromhex(d["signature"])),
        )


def platform_attest_message(epoch: int) -> bytes:
    return PLATFORM_ATTEST_PREFIX + wire.u64(epoch)


def publish_platform_list(vp: Verifier, platforms, epoch: int = 0) -> PlatformSignatureList:
    """Provider verifier signs up each platform under its named base.  A
    platform whose signature fails is left out and recorded in ``failures``."""
    base_name = vp.authorized_base
    if base_name is None:
        raise UnauthorizedVerifier(f"{vp.name} holds no valid named-base certificate")
    base = PseudonymBase.named(base_name)
    message = platform_attest_message(epoch)
    entries, failures = [], []
    for platform in platforms:
        try:
            sig = platform.qe_sign(message, base, vp.credential)
        except (PlatformError, CryptoError) as exc:
            log.warning("platform %s failed to sign: %s", platform.id, exc)
            failures.append(platform.id)
            continue
        if not crypto.epid_verify(vp.group, base, message, sig):
            failures.append(platform.id)
            continue
        entries.append(ListEntry(sig.pseudonym, sig.proof, sig.message))
    lst = PlatformSignatureList(base_name, vp.group.group_id, entries, list(vp.credential), failures=failures)
    lst.signature = crypto.sign(vp.keypair.secret, lst.signed_bytes())
    return lst


def anti_cuckoo_check(tenant: Verifier, platform: Platform, lst: PlatformSignatureList) -> bool:
    """Fresh named-base signature from ``platform`` must link to the list."""
    if tenant.authorized_base != lst.base_name:
        raise UnauthorizedVerifier(f"{tenant.name} is not authorized for base {lst.base_name!r}")
    if not lst.is_authentic(tenant.root_pk):
        return False
    nonce = tenant.rng.bytes(32)
    message = b"trusdn-anti-cuckoo" + nonce + tenant.name.encode()
    try:
        sig = platform.qe_sign(message, lst.base, tenant.credential)
    except (PlatformError, CryptoError):
        return False
    if not crypto.epid_verify(tenant.group, lst.base, message, sig):
        return False
    return lst.links(sig)
