"""Independent reference computations used by the tests.

Nothing here imports the package under test: HKDF is rebuilt from the stdlib
``hmac`` module, Edwards25519 arithmetic is plain integer math, and the
summary statistics are recomputed by brute force with exact fractions.
"""

from __future__ import annotations

import csv
import hashlib
import hmac
import math
from fractions import Fraction

# -- HKDF-SHA256 --------------------------------------------------------------


def hkdf_sha256(ikm: bytes, info: bytes, length: int = 32, salt: bytes = b"") -> bytes:
    prk = hmac.new(salt or bytes(32), ikm, hashlib.sha256).digest()
    out, block, counter = b"", b"", 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([counter]), hashlib.sha256).digest()
        out += block
        counter += 1
    return out[:length]


def framed(*fields: bytes) -> bytes:
    """Length-prefixed concatenation: 4-byte big-endian length then bytes."""
    return b"".join(len(f).to_bytes(4, "big") + f for f in fields)


def session_key_oracle(secret: bytes, cn: bytes, sn: bytes, canonical_flow: bytes) -> bytes:
    return hkdf_sha256(secret, b"trusdn/session" + cn + sn + canonical_flow)


def hmac_sha256(key: bytes, m: bytes) -> bytes:
    return hmac.new(key, m, hashlib.sha256).digest()


# -- Edwards25519 -------------------------------------------------------------

P = 2**255 - 19
L = 2**252 + 27742317777372353535851937790883648493
D = -121665 * pow(121666, P - 2, P) % P
SQRT_M1 = pow(2, (P - 1) // 4, P)


def _recover_x(y: int, sign: int) -> int | None:
    if y >= P:
        return None
    x2 = (y * y - 1) * pow(D * y * y + 1, P - 2, P) % P
    if x2 == 0:
        return None if sign else 0
    x = pow(x2, (P + 3) // 8, P)
    if (x * x - x2) % P:
        x = x * SQRT_M1 % P
    if (x * x - x2) % P:
        return None
    if x & 1 != sign:
        x = P - x
    return x


def decode_point(s: bytes):
    y = int.from_bytes(s, "little")
    sign = y >> 255
    y &= (1 << 255) - 1
    x = _recover_x(y, sign)
    if x is None:
        raise ValueError("not a curve point")
    return (x, y, 1, x * y % P)


def encode_point(pt) -> bytes:
    x, y, z, _ = pt
    zi = pow(z, P - 2, P)
    x, y = x * zi % P, y * zi % P
    return (y | ((x & 1) << 255)).to_bytes(32, "little")


def point_add(a, b):
    x1, y1, z1, t1 = a
    x2, y2, z2, t2 = b
    A = (y1 - x1) * (y2 - x2) % P
    B = (y1 + x1) * (y2 + x2) % P
    C = 2 * t1 * t2 * D % P
    Dd = 2 * z1 * z2 % P
    E, F, G, H = B - A, Dd - C, Dd + C, B + A
    return (E * F % P, G * H % P, F * G % P, E * H % P)


def scalar_mult(k: int, point: bytes) -> bytes:
    """B^k in multiplicative notation (k*B on the curve)."""
    q = (0, 1, 1, 0)
    pt = decode_point(point)
    k %= L
    while k:
        if k & 1:
            q = point_add(q, pt)
        pt = point_add(pt, pt)
        k >>= 1
    return encode_point(q)


# -- statistics -----------------------------------------------------------------


def brute_stats(values) -> dict[str, float]:
    xs = sorted(Fraction(v) for v in values)
    n = len(xs)
    mean = sum(xs) / n
    mid = n // 2
    median = xs[mid] if n % 2 else (xs[mid - 1] + xs[mid]) / 2
    var = sum((x - mean) ** 2 for x in xs) / n
    return {
        "min": float(xs[0]),
        "max": float(xs[-1]),
        "mean": float(mean),
        "median": float(median),
        "stddev": math.sqrt(var),
    }


def csv_columns(path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    names = [k for k in rows[0] if k not in ("flow", "mode")]
    return {k: [float(r[k]) for r in rows] for k in names}
