"""Emulated SGX-style platforms.

A :class:`Platform` plays the role of CPU + firmware: it measures enclaves at
build time, holds per-enclave report keys, produces and checks local
attestation reports, and hosts exactly one quoting enclave that signs quotes
with the platform's group member secret.

Enclave secrets are reachable only through :meth:`Platform.enter`, which
stands for code executing inside the enclave.  Host-level accessors refuse
them with :class:`IsolationViolation`.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto
from .crypto import (
    DeterministicRandom,
    GroupMemberSecret,
    KeyOwner,
    KeyRole,
    LinkableSignature,
    MacTag,
    PseudonymBase,
)
from .errors import (
    CrossPlatformReport,
    DuplicateQuotingEnclave,
    IsolationViolation,
    ReportRejected,
    UnauthorizedVerifier,
    UnknownEnclave,
    WireFormatError,
)
from .wire import pack_fields, unpack_fields

QE_CODE = b"trusdn quoting enclave v1"
PUBLIC_FIELDS = ("public_key", "measurement", "kind")


class EnclaveKind(enum.Enum):
    SWITCH = 1
    COMPUTE_TASK = 2
    QUOTING = 3
    BOOTSTRAP = 4


@dataclass(frozen=True)
class Measurement:
    digest: bytes

    def hex(self) -> str:
        return self.digest.hex()


def page_layout(kind: EnclaveKind, code: bytes, config: bytes) -> bytes:
    return bytes([kind.value]) + len(code).to_bytes(8, "big") + len(config).to_bytes(8, "big")


def measure(kind: EnclaveKind, code: bytes, config: bytes) -> Measurement:
    # the fixed-width layout suffix makes the concatenation unambiguous
    return Measurement(hashlib.sha256(code + config + page_layout(kind, code, config)).digest())


@dataclass(frozen=True)
class Report:
    reporter_measurement: Measurement
    target_id: str
    user_data: bytes
    mac: MacTag

    def body(self) -> bytes:
        return pack_fields(self.reporter_measurement.digest, self.target_id.encode(), self.user_data)

    def to_bytes(self) -> bytes:
        return pack_fields(self.reporter_measurement.digest, self.target_id.encode(), self.user_data, self.mac.bytes)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Report":
        meas, target, user_data, mac = unpack_fields(data, 4)
        try:
            return cls(Measurement(meas), target.decode(), user_data, MacTag(mac))
        except (ValueError, UnicodeDecodeError) as exc:
            raise WireFormatError(str(exc)) from None


@dataclass(frozen=True)
class Quote:
    report: Report
    challenge_nonce: bytes
    signature: LinkableSignature

    @staticmethod
    def signed_message(report: Report, nonce: bytes) -> bytes:
        return report.to_bytes() + nonce

    def to_bytes(self) -> bytes:
        sig = self.signature
        return pack_fields(
            self.report.to_bytes(),
            self.challenge_nonce,
            sig.pseudonym,
            sig.base.encode(),
            sig.proof,
            sig.group_id.encode(),
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Quote":
        report, nonce, pseudonym, base, proof, group_id = unpack_fields(data, 6)
        rep = Report.from_bytes(report)
        sig = LinkableSignature(
            pseudonym=pseudonym,
            base=PseudonymBase.decode(base),
            proof=proof,
            message=Quote.signed_message(rep, nonce),
            group_id=group_id.decode(),
        )
        return cls(rep, nonce, sig)


class Enclave:
    """Enclave record as seen by the platform.  ``_keypair`` and ``_state``
    model EPC-resident memory."""

    def __init__(self, eid, kind, measurement, host_platform, keypair, config=b""):
        self.id = eid
        self.kind = kind
        self.measurement = measurement
        self.host_platform = host_platform
        self.config = config  # measured, so public
        self._keypair = keypair
        self._state: dict = {}

    @property
    def public_key(self) -> bytes:
        return self._keypair.public

    def __repr__(self):
        return f"Enclave({self.id}, {self.kind.name}, {self.measurement.hex()[:12]})"


@dataclass
class EnclaveContext:
    """Handle given to code running inside an enclave."""

    enclave_id: str
    kind: EnclaveKind
    measurement: Measurement
    keypair: crypto.KeyPair
    state: dict
    platform: "Platform"
    config: bytes = b""

    def ereport(self, target: str, user_data: bytes) -> Report:
        return self.platform.ereport(self.enclave_id, target, user_data)


_OWNER = {
    EnclaveKind.SWITCH: KeyOwner.ENCLAVE,
    EnclaveKind.COMPUTE_TASK: KeyOwner.COMPUTE_TASK,
    EnclaveKind.QUOTING: KeyOwner.QUOTING_ENCLAVE,
    EnclaveKind.BOOTSTRAP: KeyOwner.ENCLAVE,
}


class Datacenter:
    """Registry of platforms, used to resolve cuckoo redirections."""

    def __init__(self):
        self.platforms: dict[str, Platform] = {}

    def add(self, platform: "Platform") -> "Platform":
        self.platforms[platform.id] = platform
        platform.datacenter = self
        return platform

    def __getitem__(self, pid: str) -> "Platform":
        return self.platforms[pid]


class Platform:
    def __init__(
        self,
        pid: str,
        rng: DeterministicRandom,
        member: GroupMemberSecret,
        *,
        honest: bool = True,
        named_base_policy: Optional[Callable[[PseudonymBase, object], bool]] = None,
    ):
        self.id = pid
        self.rng = rng
        self.honest = honest
        self.redirect_target: Optional[str] = None
        # host-side malware hook applied to code before enclave build
        self.code_filter: Optional[Callable[[bytes], bytes]] = None
        self.named_base_policy = named_base_policy
        self.datacenter: Optional[Datacenter] = None
        self._report_keys: dict[str, crypto.SymmetricKey] = {}
        self._enclaves: dict[str, Enclave] = {}
        self._images: dict[str, tuple] = {}
        self._mirrors: dict[Measurement, str] = {}
        self._counter = 0
        self.qe_id = self.create_enclave(EnclaveKind.QUOTING, QE_CODE, b"")
        self._enclaves[self.qe_id]._state["member"] = member

    def __repr__(self):
        return f"Platform({self.id}, honest={self.honest})"

    # -- enclave lifecycle -------------------------------------------------

    def create_enclave(self, kind: EnclaveKind, code: bytes, config: bytes) -> str:
        if kind is EnclaveKind.QUOTING and any(
            e.kind is EnclaveKind.QUOTING for e in self._enclaves.values()
        ):
            raise DuplicateQuotingEnclave(self.id)
        self._counter += 1
        eid = f"{self.id}/e{self._counter}"
        keypair = crypto.generate_keypair(_OWNER[kind], self.rng)
        self._enclaves[eid] = Enclave(eid, kind, measure(kind, code, config), self.id, keypair, config)
        self._report_keys[eid] = crypto.generate_symmetric_key(KeyRole.REPORT_KEY, self.rng)
        self._images[eid] = (kind, code, config)
        return eid

    def bootstrap(self, kind: EnclaveKind, code: bytes, config: bytes) -> str:
        """Host-side bootstrap application: builds the enclave from the image
        it was handed, after any tampering by host malware."""
        if self.code_filter is not None:
            code = self.code_filter(code)
        return self.create_enclave(kind, code, config)

    def enclave(self, eid: str) -> Enclave:
        try:
            return self._enclaves[eid]
        except KeyError:
            raise UnknownEnclave(eid) from None

    def enclave_ids(self) -> list[str]:
        return list(self._enclaves)

    def enter(self, eid: str) -> EnclaveContext:
        e = self.enclave(eid)
        return EnclaveContext(eid, e.kind, e.measurement, e._keypair, e._state, self, e.config)

    # -- local attestation ---------------------------------------------------

    def ereport(self, reporter: str, target: str, user_data: bytes) -> Report:
        rep = self.enclave(reporter)
        if target not in self._enclaves:
            raise CrossPlatformReport(f"{target} is not on platform {self.id}")
        if len(user_data) != 32:
            raise ValueError("user_data must be 32 bytes")
        unsigned = Report(rep.measurement, target, user_data, MacTag(bytes(32)))
        mac = crypto.mac_tag(self._report_keys[target], unsigned.body())
        return Report(rep.measurement, target, user_data, mac)

    def verify_report(self, target: str, report: Report) -> bool:
        key = self._report_keys.get(target)
        if key is None or report.target_id != target:
            return False
        return crypto.mac_check(key, report.body(), report.mac)

    # -- quoting -----------------------------------------------------------

    def qe_quote(self, report: Report, nonce: bytes, base: PseudonymBase, credential=None) -> Quote:
        if self.redirect_target is not None:
            # malware forwards the request to the attacker's platform
            return self.datacenter[self.redirect_target]._sign_quote(report, nonce, base)
        if not self.verify_report(self.qe_id, report):
            raise ReportRejected(f"report for {report.target_id} rejected by QE on {self.id}")
        self._check_base_policy(base, credential)
        return self._sign_quote(report, nonce, base)

    def qe_sign(self, message: bytes, base: PseudonymBase, credential=None) -> LinkableSignature:
        """Platform-level signature by the QE over an arbitrary attestation
        message (used when a provider verifier enumerates its platforms)."""
        if self.redirect_target is not None:
            return self.datacenter[self.redirect_target]._member_sign(message, base)
        self._check_base_policy(base, credential)
        return self._member_sign(message, base)

    def _check_base_policy(self, base, credential):
        if base.kind is crypto.BaseKind.NAMED and self.named_base_policy is not None:
            if not self.named_base_policy(base, credential):
                raise UnauthorizedVerifier(f"named base {base.name!r} not authorized")

    def _member_sign(self, message: bytes, base: PseudonymBase) -> LinkableSignature:
        member = self._enclaves[self.qe_id]._state["member"]
        return crypto.epid_sign(member, base, message, self.rng)

    def _sign_quote(self, report: Report, nonce: bytes, base: PseudonymBase) -> Quote:
        sig = self._member_sign(Quote.signed_message(report, nonce), base)
        return Quote(report, nonce, sig)

    def answer_challenge(self, eid: str, nonce: bytes, base: PseudonymBase, credential=None):
        """Host bootstrap path for remote attestation: the enclave reports to
        the QE with ``hash(public key)`` as user data, the QE quotes.

        Returns ``(quote, enclave public key)``.
        """
        if self.redirect_target is not None:
            malicious = self.datacenter[self.redirect_target]
            kind, code, config = self._images[self.enclave(eid).id]
            return malicious.answer_challenge(malicious.mirror(kind, code, config), nonce, base, credential)
        ctx = self.enter(eid)
        report = ctx.ereport(self.qe_id, hashlib.sha256(ctx.keypair.public).digest())
        return self.qe_quote(report, nonce, base, credential), ctx.keypair.public

    def mirror(self, kind: EnclaveKind, code: bytes, config: bytes) -> str:
        """Attacker-side copy of an enclave image (cuckoo attacks)."""
        m = measure(kind, code, config)
        if m not in self._mirrors:
            self._mirrors[m] = self.create_enclave(kind, code, config)
        return self._mirrors[m]

    # -- host view ----------------------------------------------------------

    def host_read_state(self, eid: str, what: str = "sealed_state"):
        e = self.enclave(eid)
        if what == "public_key":
            return e.public_key
        if what == "measurement":
            return e.measurement
        if what == "kind":
            return e.kind
        raise IsolationViolation(f"host access to {what!r} of {eid} refused")

    def physical_extract(self, eid: str) -> dict:
        """Hardware attack on an adversary-owned machine; refused on honest
        platforms, whose processor is assumed uncompromised."""
        if self.honest:
            raise IsolationViolation(f"{self.id} processor is not under adversary control")
        e = self.enclave(eid)
        return {"keypair": e._keypair, "state": e._state}
