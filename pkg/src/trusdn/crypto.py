"""Cryptographic primitives: AEAD, MAC, hybrid public-key wrapping, signatures
and a pseudonym-based linkable signature over the Ed25519 prime-order group.

Every random value is drawn from an explicit :class:`DeterministicRandom`, so a
whole simulation is reproducible from one seed.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from nacl import bindings as sodium
from nacl.exceptions import RuntimeError as SodiumRuntimeError

from .errors import (
    AuthenticationFailure,
    DecryptionFailure,
    InvalidBase,
    MessageTooLong,
    NonceExhausted,
    UnverifiedInput,
    WrongKeyRole,
)

KEY_BYTES = 32
NONCE_BYTES = 12
TAG_BYTES = 16
MAC_BYTES = 32
MAX_WRAP_BYTES = 4096
NONCE_COUNTER_LIMIT = 2**64

# order of the Ed25519 prime-order subgroup
GROUP_ORDER = 2**252 + 27742317777372353535851937790883648493

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw
_RAW_PRIV = serialization.PrivateFormat.Raw
_NO_ENC = serialization.NoEncryption()


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(len(p).to_bytes(4, "big"))
        h.update(p)
    return h.digest()


def ct_equal(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(a, b)


def hkdf(secret: bytes, info: bytes, length: int = KEY_BYTES, salt: bytes = b"") -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=length, salt=salt or None, info=info
    ).derive(secret)


class DeterministicRandom:
    """Seeded byte source shared by every component of one simulation.

    ``observers`` are notified of every secret value produced through
    :meth:`note_secret`; the adversary harness uses that to scan transcripts
    for leaked key material.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._rng = random.Random(seed)
        self.observers: list[Callable[[bytes], None]] = []

    def bytes(self, n: int) -> bytes:
        return self._rng.randbytes(n)

    def randrange(self, *args) -> int:
        return self._rng.randrange(*args)

    def random(self) -> float:
        return self._rng.random()

    def fork(self, label: str) -> "DeterministicRandom":
        child_seed = int.from_bytes(sha256(self.bytes(16), label.encode()), "big")
        child = DeterministicRandom(child_seed)
        child.observers = self.observers
        return child

    def note_secret(self, value: bytes) -> None:
        for obs in self.observers:
            obs(value)


# ---------------------------------------------------------------------------
# symmetric keys, AEAD and MAC
# ---------------------------------------------------------------------------


class KeyRole(enum.Enum):
    SESSION_ALPHA = "session-alpha"
    DOMAIN_BETA = "domain-beta"
    EPHEMERAL_ENC = "ephemeral-enc"
    EPHEMERAL_MAC = "ephemeral-mac"
    FLOW_PSK = "flow-psk"
    REPORT_KEY = "report-key"
    DERIVED = "derived"


SEAL_ROLES = frozenset(
    {KeyRole.SESSION_ALPHA, KeyRole.DOMAIN_BETA, KeyRole.EPHEMERAL_ENC, KeyRole.DERIVED}
)
MAC_ROLES = frozenset({KeyRole.EPHEMERAL_MAC, KeyRole.DERIVED, KeyRole.REPORT_KEY})


@dataclass(frozen=True)
class SymmetricKey:
    bytes: bytes
    role: KeyRole
    # nonce lanes: sender tag -> next counter value; the only mutable state
    _counters: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self):
        if len(self.bytes) != KEY_BYTES:
            raise ValueError(f"symmetric key must be {KEY_BYTES} bytes")
        if not isinstance(self.role, KeyRole):
            raise TypeError("role must be a KeyRole")

    def __repr__(self):
        return f"SymmetricKey(role={self.role.value}, id={self.fingerprint()})"

    def fingerprint(self) -> str:
        return sha256(b"key-fingerprint", self.bytes).hex()[:12]

    def next_nonce(self, sender: bytes = b"") -> bytes:
        lane = hashlib.sha256(b"nonce-lane" + sender).digest()[:4]
        counter = self._counters.get(lane, 0)
        if counter >= NONCE_COUNTER_LIMIT:
            raise NonceExhausted(f"nonce counter exhausted for {self!r}")
        self._counters[lane] = counter + 1
        return lane + counter.to_bytes(8, "big")


def generate_symmetric_key(role: KeyRole, rng: DeterministicRandom) -> SymmetricKey:
    key = SymmetricKey(rng.bytes(KEY_BYTES), role)
    rng.note_secret(key.bytes)
    return key


@dataclass(frozen=True)
class Ciphertext:
    nonce: bytes
    body: bytes
    aad_digest: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.aad_digest + self.body

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ciphertext":
        if len(data) < NONCE_BYTES + 32 + TAG_BYTES:
            raise AuthenticationFailure("ciphertext too short")
        return cls(
            nonce=data[:NONCE_BYTES],
            aad_digest=data[NONCE_BYTES : NONCE_BYTES + 32],
            body=data[NONCE_BYTES + 32 :],
        )


def sym_seal(key: SymmetricKey, plaintext: bytes, aad: bytes = b"", sender: bytes = b"") -> Ciphertext:
    """Encrypt under ``key``; ``sender`` selects the nonce lane so that parties
    sharing one key never collide on a nonce."""
    if key.role not in SEAL_ROLES:
        raise WrongKeyRole(f"{key.role.value} keys cannot encrypt")
    nonce = key.next_nonce(sender)
    body = ChaCha20Poly1305(key.bytes).encrypt(nonce, plaintext, aad)
    return Ciphertext(nonce=nonce, body=body, aad_digest=hashlib.sha256(aad).digest())


def sym_open(key: SymmetricKey, c: Ciphertext, aad: bytes = b"") -> bytes:
    if not ct_equal(hashlib.sha256(aad).digest(), c.aad_digest):
        raise AuthenticationFailure("associated data mismatch")
    if len(c.nonce) != NONCE_BYTES:
        raise AuthenticationFailure("bad nonce length")
    try:
        return ChaCha20Poly1305(key.bytes).decrypt(c.nonce, c.body, aad)
    except InvalidTag:
        raise AuthenticationFailure("ciphertext failed authentication") from None


@dataclass(frozen=True)
class MacTag:
    bytes: bytes

    def __post_init__(self):
        if len(self.bytes) != MAC_BYTES:
            raise ValueError("MAC tag must be 32 bytes")


def mac_tag(key: SymmetricKey, m: bytes) -> MacTag:
    if key.role not in MAC_ROLES:
        raise WrongKeyRole(f"{key.role.value} keys cannot MAC")
    return MacTag(hmac.new(key.bytes, m, hashlib.sha256).digest())


def mac_check(key: SymmetricKey, m: bytes, tag) -> bool:
    raw = tag.bytes if isinstance(tag, MacTag) else bytes(tag)
    if len(raw) != MAC_BYTES or key.role not in MAC_ROLES:
        return False
    return ct_equal(hmac.new(key.bytes, m, hashlib.sha256).digest(), raw)


# ---------------------------------------------------------------------------
# key pairs, hybrid encryption and signatures
# ---------------------------------------------------------------------------


class KeyOwner(enum.Enum):
    ENCLAVE = "enclave"
    COMPUTE_TASK = "compute-task"
    QUOTING_ENCLAVE = "quoting-enclave"
    VERIFIER = "verifier"
    AUTHORITY = "authority"
    CONTROLLER = "controller"


def _x25519_private(secret: bytes) -> X25519PrivateKey:
    return X25519PrivateKey.from_private_bytes(hkdf(secret, b"trusdn/x25519"))


def _ed25519_private(secret: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(hkdf(secret, b"trusdn/ed25519"))


def derive_public(secret: bytes) -> bytes:
    """Public key = X25519 encryption key || Ed25519 verification key."""
    enc = _x25519_private(secret).public_key().public_bytes(_RAW, _RAW_PUB)
    sig = _ed25519_private(secret).public_key().public_bytes(_RAW, _RAW_PUB)
    return enc + sig


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    secret: bytes = field(repr=False)
    owner: KeyOwner

    def __post_init__(self):
        if len(self.secret) != KEY_BYTES or len(self.public) != 2 * KEY_BYTES:
            raise ValueError("malformed key pair")


def generate_keypair(owner: KeyOwner, rng: DeterministicRandom) -> KeyPair:
    secret = rng.bytes(KEY_BYTES)
    rng.note_secret(secret)
    rng.note_secret(hkdf(secret, b"trusdn/x25519"))
    rng.note_secret(hkdf(secret, b"trusdn/ed25519"))
    return KeyPair(public=derive_public(secret), secret=secret, owner=owner)


_WRAP_NONCE = bytes(NONCE_BYTES)


def hybrid_wrap(pk: bytes, m: bytes, rng: DeterministicRandom) -> bytes:
    """X25519 key encapsulation followed by AEAD of ``m`` under the derived key."""
    if len(m) > MAX_WRAP_BYTES:
        raise MessageTooLong(f"{len(m)} bytes exceeds {MAX_WRAP_BYTES}")
    recipient = X25519PublicKey.from_public_bytes(pk[:KEY_BYTES])
    eph = X25519PrivateKey.from_private_bytes(rng.bytes(KEY_BYTES))
    eph_pub = eph.public_key().public_bytes(_RAW, _RAW_PUB)
    shared = eph.exchange(recipient)
    key = hkdf(shared, b"trusdn/wrap" + eph_pub + pk[:KEY_BYTES])
    # one-time key, so a fixed nonce is safe
    return eph_pub + ChaCha20Poly1305(key).encrypt(_WRAP_NONCE, m, eph_pub)


def hybrid_unwrap(sk: bytes, c: bytes) -> bytes:
    if len(c) < KEY_BYTES + TAG_BYTES:
        raise DecryptionFailure("encapsulation too short")
    priv = _x25519_private(sk)
    own_pub = priv.public_key().public_bytes(_RAW, _RAW_PUB)
    eph_pub = c[:KEY_BYTES]
    try:
        shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    except ValueError:
        raise DecryptionFailure("invalid encapsulated key") from None
    key = hkdf(shared, b"trusdn/wrap" + eph_pub + own_pub)
    try:
        return ChaCha20Poly1305(key).decrypt(_WRAP_NONCE, c[KEY_BYTES:], eph_pub)
    except InvalidTag:
        raise DecryptionFailure("hybrid ciphertext rejected") from None


def x25519_keypair(rng: DeterministicRandom) -> tuple[bytes, bytes]:
    """Ephemeral Diffie-Hellman key pair ``(secret, public)``."""
    secret = rng.bytes(KEY_BYTES)
    rng.note_secret(secret)
    pub = X25519PrivateKey.from_private_bytes(secret).public_key().public_bytes(_RAW, _RAW_PUB)
    return secret, pub


def x25519_shared(secret: bytes, peer_public: bytes) -> bytes:
    try:
        return X25519PrivateKey.from_private_bytes(secret).exchange(X25519PublicKey.from_public_bytes(peer_public))
    except ValueError:
        raise DecryptionFailure("invalid peer share") from None


@dataclass(frozen=True)
class Signature:
    bytes: bytes


def sign(sk: bytes, m: bytes) -> Signature:
    return Signature(_ed25519_private(sk).sign(m))


def verify(pk: bytes, m: bytes, sig) -> int:
    """Return 1 for a valid signature, 0 otherwise (including malformed input)."""
    raw = sig.bytes if isinstance(sig, Signature) else sig
    try:
        Ed25519PublicKey.from_public_bytes(pk[KEY_BYTES:]).verify(raw, m)
    except (InvalidSignature, ValueError, TypeError):
        return 0
    return 1


# ---------------------------------------------------------------------------
# pseudonym-based linkable signatures
# ---------------------------------------------------------------------------


def _scalar(n: int) -> bytes:
    return (n % GROUP_ORDER).to_bytes(32, "little")


def _hash_to_scalar(*parts: bytes) -> bytes:
    h = hashlib.sha512()
    for p in parts:
        h.update(len(p).to_bytes(4, "big"))
        h.update(p)
    return sodium.crypto_core_ed25519_scalar_reduce(h.digest())


def _smul(k: bytes, point: bytes) -> bytes:
    return sodium.crypto_scalarmult_ed25519_noclamp(k, point)


def hash_to_group(label: bytes) -> bytes:
    digest = hashlib.sha256(b"trusdn/hash-to-group" + label).digest()
    return sodium.crypto_core_ed25519_from_uniform(digest)


def is_group_element(point: bytes) -> bool:
    return len(point) == 32 and bool(sodium.crypto_core_ed25519_is_valid_point(point))


@dataclass(frozen=True)
class GroupParams:
    """Public parameters of one linkable-signature group (the Ed25519
    prime-order subgroup, identified by ``group_id``)."""

    group_id: str
    order: int = GROUP_ORDER


@dataclass(frozen=True)
class GroupMemberSecret:
    f: int = field(repr=False)
    group_id: str

    def __post_init__(self):
        if not 1 <= self.f < GROUP_ORDER:
            raise ValueError("member secret out of range")


def generate_member_secret(group: GroupParams, rng: DeterministicRandom) -> GroupMemberSecret:
    while True:
        f = int.from_bytes(rng.bytes(64), "little") % GROUP_ORDER
        if f:
            rng.note_secret(_scalar(f))
            return GroupMemberSecret(f=f, group_id=group.group_id)


class BaseKind(enum.Enum):
    NAMED = "named"
    RANDOM = "random"


@dataclass(frozen=True)
class PseudonymBase:
    kind: BaseKind
    point: bytes
    name: Optional[str] = None

    @classmethod
    def named(cls, name: str) -> "PseudonymBase":
        return cls(BaseKind.NAMED, hash_to_group(b"name:" + name.encode()), name)

    @classmethod
    def random(cls, rng: DeterministicRandom) -> "PseudonymBase":
        return cls(BaseKind.RANDOM, hash_to_group(b"random:" + rng.bytes(32)))

    def is_well_formed(self) -> bool:
        if not is_group_element(self.point):
            return False
        if self.kind is BaseKind.NAMED:
            return self.name is not None and ct_equal(
                self.point, hash_to_group(b"name:" + self.name.encode())
            )
        return self.name is None

    def encode(self) -> bytes:
        name = (self.name or "").encode()
        return bytes([self.kind is BaseKind.NAMED]) + self.point + name

    @classmethod
    def decode(cls, data: bytes) -> "PseudonymBase":
        if len(data) < 33:
            raise InvalidBase("truncated base")
        if data[0] == 1:
            return cls(BaseKind.NAMED, data[1:33], data[33:].decode())
        return cls(BaseKind.RANDOM, data[1:33])


@dataclass(frozen=True)
class LinkableSignature:
    pseudonym: bytes
    base: PseudonymBase
    proof: bytes  # challenge scalar || response scalar
    message: bytes
    group_id: str


def _challenge(group_id: str, base: PseudonymBase, pseudonym: bytes, commit: bytes, m: bytes) -> bytes:
    return _hash_to_scalar(
        b"trusdn/linkable-sig", group_id.encode(), base.encode(), pseudonym, commit, m
    )


def pseudonym_for(member: GroupMemberSecret, base: PseudonymBase) -> bytes:
    return _smul(_scalar(member.f), base.point)


def epid_sign(
    member: GroupMemberSecret, base: PseudonymBase, m: bytes, rng: DeterministicRandom
) -> LinkableSignature:
    """Pseudonym ``base^f`` plus a Fiat-Shamir Schnorr proof of knowledge of f
    bound to (group id, base, pseudonym, message)."""
    if not base.is_well_formed():
        raise InvalidBase("base is not a valid group element")
    pseudonym = pseudonym_for(member, base)
    while True:
        k = sodium.crypto_core_ed25519_scalar_reduce(rng.bytes(64))
        if any(k):
            break
    commit = _smul(k, base.point)
    c = _challenge(member.group_id, base, pseudonym, commit, m)
    s = sodium.crypto_core_ed25519_scalar_add(
        k, sodium.crypto_core_ed25519_scalar_mul(c, _scalar(member.f))
    )
    return LinkableSignature(pseudonym, base, c + s, m, member.group_id)


def epid_verify(group: GroupParams, base: PseudonymBase, m: bytes, sig: LinkableSignature) -> bool:
    if sig.group_id != group.group_id or sig.base != base or not ct_equal(sig.message, m):
        return False
    if not base.is_well_formed() or not is_group_element(sig.pseudonym) or len(sig.proof) != 64:
        return False
    c, s = sig.proof[:32], sig.proof[32:]
    # reject non-canonical scalars
    if int.from_bytes(c, "little") >= GROUP_ORDER or int.from_bytes(s, "little") >= GROUP_ORDER:
        return False
    try:
        commit = sodium.crypto_core_ed25519_sub(_smul(s, base.point), _smul(c, sig.pseudonym))
    except SodiumRuntimeError:
        return False
    return ct_equal(_challenge(group.group_id, base, sig.pseudonym, commit, m), c)


def epid_linked(a: LinkableSignature, b: LinkableSignature) -> bool:
    """True iff both signatures carry the same pseudonym under one named base."""
    for sig in (a, b):
        if not epid_verify(GroupParams(sig.group_id), sig.base, sig.message, sig):
            raise UnverifiedInput("signature does not verify")
    if a.group_id != b.group_id:
        return False
    if a.base.kind is not BaseKind.NAMED or b.base.kind is not BaseKind.NAMED:
        return False
    return a.base == b.base and ct_equal(a.pseudonym, b.pseudonym)
