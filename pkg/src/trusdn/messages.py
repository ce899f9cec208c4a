"""Control messages originated by the controller.

The enrollment message goes to a freshly attested enclave:
``body = Enc(K', K_alpha || K_beta || epoch)``, ``tag = MAC(K'', body)`` and
``wrapped = Enc_pk(EK, K' || K'')``.  K' and K'' live only for the duration of
:func:`build_enrollment_message` / :func:`open_enrollment_message`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import crypto, wire
from .crypto import Ciphertext, KeyRole, MacTag, SymmetricKey
from .errors import AuthenticationFailure, BadGrantSignature, DecryptionFailure, WireFormatError, WrongKeyRole
from .flows import FlowKey
from .wire import MsgType

BODY_AAD = b"trusdn-enrollment"


@dataclass(frozen=True)
class EnrollmentMessage:
    body: Ciphertext
    tag: MacTag
    wrapped: bytes

    def encode(self) -> bytes:
        return wire.encode(MsgType.ENROLLMENT, self.body.to_bytes(), self.tag.bytes, self.wrapped)

    @classmethod
    def decode(cls, data: bytes) -> "EnrollmentMessage":
        _, (body, tag, wrapped) = wire.decode(data, MsgType.ENROLLMENT, 3)
        try:
            return cls(Ciphertext.from_bytes(body), MacTag(tag), wrapped)
        except ValueError as exc:
            raise WireFormatError(str(exc)) from None


@dataclass(frozen=True)
class EnrollmentKeys:
    k_alpha: SymmetricKey
    k_beta: Optional[SymmetricKey]
    epoch: int


def build_enrollment_message(
    ek_pk: bytes,
    k_alpha: SymmetricKey,
    k_beta: Optional[SymmetricKey],
    epoch: int,
    rng: crypto.DeterministicRandom,
) -> EnrollmentMessage:
    """``k_beta`` is None for compute tasks, which join no switch domain."""
    if k_alpha.role is not KeyRole.SESSION_ALPHA:
        raise WrongKeyRole(f"K_alpha has role {k_alpha.role}")
    if k_beta is not None and k_beta.role is not KeyRole.DOMAIN_BETA:
        raise WrongKeyRole(f"K_beta has role {k_beta.role}")
    k_enc = crypto.generate_symmetric_key(KeyRole.EPHEMERAL_ENC, rng)
    k_mac = crypto.generate_symmetric_key(KeyRole.EPHEMERAL_MAC, rng)
    plain = wire.pack_fields(k_alpha.bytes, k_beta.bytes if k_beta else b"", wire.u64(epoch))
    body = crypto.sym_seal(k_enc, plain, aad=BODY_AAD, sender=b"nc")
    tag = crypto.mac_tag(k_mac, body.to_bytes())
    wrapped = crypto.hybrid_wrap(ek_pk, k_enc.bytes + k_mac.bytes, rng)
    return EnrollmentMessage(body, tag, wrapped)


def open_enrollment_message(ek_secret: bytes, msg: EnrollmentMessage) -> EnrollmentKeys:
    """Enclave side.  The MAC is checked before the body is decrypted."""
    keys = crypto.hybrid_unwrap(ek_secret, msg.wrapped)
    if len(keys) != 2 * crypto.KEY_BYTES:
        raise DecryptionFailure("wrapped enrollment keys have the wrong length")
    k_enc = SymmetricKey(keys[:32], KeyRole.EPHEMERAL_ENC)
    k_mac = SymmetricKey(keys[32:], KeyRole.EPHEMERAL_MAC)
    if not crypto.mac_check(k_mac, msg.body.to_bytes(), msg.tag):
        raise AuthenticationFailure("enrollment MAC mismatch")
    plain = crypto.sym_open(k_enc, msg.body, aad=BODY_AAD)
    try:
        alpha, beta, epoch = wire.unpack_fields(plain, 3)
        epoch = wire.read_u64(epoch)
    except WireFormatError as exc:
        raise DecryptionFailure(f"malformed enrollment body: {exc}") from None
    if len(alpha) != 32 or len(beta) not in (0, 32):
        raise DecryptionFailure("malformed enrollment keys")
    return EnrollmentKeys(
        SymmetricKey(alpha, KeyRole.SESSION_ALPHA),
        SymmetricKey(beta, KeyRole.DOMAIN_BETA) if beta else None,
        epoch,
    )


# ---------------------------------------------------------------------------
# flow PSK grants
# ---------------------------------------------------------------------------


def _grant_plaintext(flow: FlowKey, epoch: int, key: SymmetricKey) -> bytes:
    return wire.pack_fields(flow.encode(), wire.u64(epoch), key.bytes)


@dataclass(frozen=True)
class PskGrant:
    """One flow key wrapped for both endpoints and signed by the controller.

    ``key`` is the controller's retained copy; it is never serialized.
    """

    flow: FlowKey
    epoch: int
    recipients: tuple[str, str]
    wrapped_i: bytes
    wrapped_j: bytes
    nc_signature: crypto.Signature
    key: Optional[SymmetricKey] = field(default=None, compare=False, repr=False)

    def signed_bytes(self) -> bytes:
        return wire.pack_fields(
            self.flow.encode(),
            wire.u64(self.epoch),
            self.recipients[0].encode(),
            self.recipients[1].encode(),
            self.wrapped_i,
            self.wrapped_j,
        )

    def encode(self) -> bytes:
        return wire.frame(MsgType.PSK_GRANT, wire.pack_fields(self.signed_bytes(), self.nc_signature.bytes))

    @classmethod
    def decode(cls, data: bytes) -> "PskGrant":
        _, (signed, sig) = wire.decode(data, MsgType.PSK_GRANT, 2)
        flow, epoch, ri, rj, wi, wj = wire.unpack_fields(signed, 6)
        try:
            return cls(FlowKey.decode(flow), wire.read_u64(epoch), (ri.decode(), rj.decode()), wi, wj, crypto.Signature(sig))
        except (ValueError, UnicodeDecodeError) as exc:
            raise WireFormatError(str(exc)) from None


def make_psk_grant(
    flow: FlowKey,
    epoch: int,
    key: SymmetricKey,
    recipients: tuple[tuple[str, bytes], tuple[str, bytes]],
    nc_secret: bytes,
    rng: crypto.DeterministicRandom,
) -> PskGrant:
    """``recipients`` is ``((ct_i, CK_i pk), (ct_j, CK_j pk))``."""
    if key.role is not KeyRole.FLOW_PSK:
        raise WrongKeyRole(f"flow key has role {key.role}")
    flow = flow.canonical()
    plain = _grant_plaintext(flow, epoch, key)
    (ci, pki), (cj, pkj) = recipients
    wi = crypto.hybrid_wrap(pki, plain, rng)
    wj = crypto.hybrid_wrap(pkj, plain, rng)
    unsigned = PskGrant(flow, epoch, (ci, cj), wi, wj, crypto.Signature(b""))
    sig = crypto.sign(nc_secret, unsigned.signed_bytes())
    return PskGrant(flow, epoch, (ci, cj), wi, wj, sig, key)


def open_psk_grant(grant: PskGrant, me: str, ck_secret: bytes, nc_pk: bytes) -> SymmetricKey:
    if not crypto.verify(nc_pk, grant.signed_bytes(), grant.nc_signature):
        raise BadGrantSignature(f"grant for {grant.flow} is not signed by the controller")
    if me == grant.recipients[0]:
        wrapped = grant.wrapped_i
    elif me == grant.recipients[1]:
        wrapped = grant.wrapped_j
    else:
        raise DecryptionFailure(f"grant for {grant.flow} is not addressed to {me}")
    plain = crypto.hybrid_unwrap(ck_secret, wrapped)
    try:
        flow, epoch, key = wire.unpack_fields(plain, 3)
        if FlowKey.decode(flow) != grant.flow or wire.read_u64(epoch) != grant.epoch:
            raise DecryptionFailure("grant header does not match wrapped content")
        return SymmetricKey(key, KeyRole.FLOW_PSK)
    except (WireFormatError, ValueError) as exc:
        raise DecryptionFailure(f"malformed grant: {exc}") from None
