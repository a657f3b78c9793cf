"""Leveled BFV-style homomorphic encryption over R_q with Z_t slots.

One scheme serves both the plain-HE baseline and the transciphering
pipeline: plaintexts are length-N vectors over Z_t living in the NTT
slots of a polynomial, scaled by round(q/t) at encryption, so every
homomorphic operation acts slotwise mod t.  The modulus q is a single
~200-bit prime: wide enough that the depth-3 keystream circuit (four
uniform-mod-t affine layers and three squarings, each affine layer
multiplying noise by roughly sqrt(N) * t) finishes with > 20 bits of
margin below the decryption bound q/2t.  No rotation keys exist; the
data layout never moves between slots.

Security disclaimer: parameters are chosen for exactness and audit
speed at desk scale, not for any concrete hardness level.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, SerializationError
from .ring import (
    Poly,
    RingParams,
    negacyclic_convolve,
    ntt_residues,
    split_residues,
    combine_residues,
    poly_byte_size,
    poly_from_bytes,
    poly_to_bytes,
    sample_gaussian,
    sample_ternary,
    sample_uniform,
    _conv_tables,
    _primes_for_bound,
)

RELIN_BASE_BITS = 48  # three 16-bit limbs per digit; keeps extraction vectorized


def _delta_q(params: RingParams) -> int:
    return (params.q + params.t // 2) // params.t


def relin_digit_count(params: RingParams) -> int:
    return (params.q.bit_length() + RELIN_BASE_BITS - 1) // RELIN_BASE_BITS


@dataclass(eq=False)
class SecretKey:
    s: Poly
    params: RingParams
    _ntt_cache: dict = field(default_factory=dict, repr=False)


@dataclass(eq=False)
class PublicKey:
    b: Poly
    a: Poly
    params: RingParams
    _ntt_cache: dict = field(default_factory=dict, repr=False)


@dataclass(eq=False)
class RelinKey:
    """Key-switching elements for s^2 -> s in base 2^RELIN_BASE_BITS."""

    elements: tuple
    params: RingParams
    _ntt_cache: dict = field(default_factory=dict, repr=False)


@dataclass(eq=False)
class Ciphertext:
    """Pair of R_q polynomials; level/noise fields are informational."""

    c0: Poly
    c1: Poly
    params: RingParams
    level: int = 3
    noise_bits: float = 0.0


def slot_count(params: RingParams) -> int:
    return params.n


# ---------------------------------------------------------------------------
# Internal helpers around the CRT convolution engine


def _small_signed(p: Poly) -> np.ndarray:
    """Ternary/error polynomial (canonical mod q) as a signed int64 array."""
    c = p.centered()
    return np.array([int(x) for x in c], dtype=np.int64)


def _cached_ntt(cache: dict, name: str, coeffs: np.ndarray, modulus: int, k: int) -> np.ndarray:
    key = (name, k)
    val = cache.get(key)
    if val is None:
        val = ntt_residues(split_residues(coeffs, modulus, k), k)
        cache[key] = val
    return val


def _mul_by_small(big_ntt: np.ndarray, small_ntt: np.ndarray, k: int, n: int) -> np.ndarray:
    """Product of pre-transformed residue stacks -> object array (exact ints)."""
    tab = _conv_tables(k, n)
    prod = (big_ntt * small_ntt) % tab.ps2d
    return combine_residues(ntt_residues(prod, k, inverse=True), k)


def _k_ternary(params: RingParams) -> int:
    # |conv| <= N * (q/2) * 1
    return _primes_for_bound(params.n * (params.q // 2 + 1) * 2)


def _k_plain(params: RingParams) -> int:
    # |conv| <= N * (q/2) * (t/2)
    return _primes_for_bound(params.n * (params.q // 2 + 1) * (params.t // 2 + 1))


def _k_tensor(params: RingParams) -> int:
    return _primes_for_bound(params.n * (params.q // 2 + 1) ** 2)


def _k_digit(params: RingParams) -> int:
    return _primes_for_bound(params.n * (params.q // 2 + 1) * (1 << RELIN_BASE_BITS))


# ---------------------------------------------------------------------------
# Key generation


def keygen(params: RingParams, rng: np.random.Generator):
    """Generate (SecretKey, PublicKey, RelinKey) satisfying the roundtrip
    contract decrypt(sk, encrypt(pk, x)) == x."""
    n, q = params.n, params.q
    s = sample_ternary(n, q, rng)
    s_small = _small_signed(s)

    a = sample_uniform(n, q, rng)
    e = sample_gaussian(n, q, params.sigma, rng)
    a_s = negacyclic_convolve(a.coeffs, q, s_small, 3)
    b = Poly.make((-(a_s + _small_signed(e))) % q, q)
    sk = SecretKey(s, params)
    pk = PublicKey(b, a, params)

    # s^2 via the exact engine; |s| <= 1 so 3 primes suffice
    s2 = negacyclic_convolve(s_small, 3, s_small, 3, bound=n)
    base = 1 << RELIN_BASE_BITS
    elems = []
    power = 1
    for _ in range(relin_digit_count(params)):
        ai = sample_uniform(n, q, rng)
        ei = sample_gaussian(n, q, params.sigma, rng)
        ai_s = negacyclic_convolve(ai.coeffs, q, s_small, 3)
        bi = Poly.make((-(ai_s + _small_signed(ei)) + power * s2) % q, q)
        elems.append((bi, ai))
        power = (power * base) % q
    rlk = RelinKey(tuple(elems), params)
    return sk, pk, rlk


# ---------------------------------------------------------------------------
# Slot encoding


def encode_slots(values, params: RingParams) -> Poly:
    """Slot vector over Z_t -> plaintext polynomial (inverse NTT mod t)."""
    v = np.asarray(values, dtype=np.int64) % params.t
    if len(v) != params.n:
        raise ParameterError(f"slot vector must have length N={params.n}, got {len(v)}")
    from .ring import ntt_inverse  # local import keeps module init cheap

    return ntt_inverse(Poly(v, params.t, ntt=True))


def decode_slots(p: Poly, params: RingParams) -> np.ndarray:
    """Plaintext polynomial -> slot vector (forward NTT mod t)."""
    if p.modulus != params.t or p.ntt:
        raise ParameterError("decode_slots expects a coefficient-domain mod-t polynomial")
    from .ring import ntt_forward

    return ntt_forward(p).coeffs.astype(np.int64)


# ---------------------------------------------------------------------------
# Encrypt / decrypt


def encrypt(pk: PublicKey, values, rng: np.random.Generator) -> Ciphertext:
    """Fresh encryption of a Z_t slot vector under the public key."""
    params = pk.params
    n, q = params.n, params.q
    m_poly = encode_slots(values, params)
    u = _small_signed(sample_ternary(n, q, rng))
    e1 = _small_signed(sample_gaussian(n, q, params.sigma, rng))
    e2 = _small_signed(sample_gaussian(n, q, params.sigma, rng))

    k = _k_ternary(params)
    fb = _cached_ntt(pk._ntt_cache, "b", pk.b.coeffs, q, k)
    fa = _cached_ntt(pk._ntt_cache, "a", pk.a.coeffs, q, k)
    fu = ntt_residues(split_residues(u, 3, k), k)
    bu = _mul_by_small(fb, fu, k, n)
    au = _mul_by_small(fa, fu, k, n)

    scaled = m_poly.coeffs.astype(object) * _delta_q(params)
    c0 = Poly.make(bu + e1 + scaled, q)
    c1 = Poly.make(au + e2, q)
    noise = math.log2(max(params.sigma, 1.0) * math.sqrt(2 * n))
    return Ciphertext(c0, c1, params, level=3, noise_bits=noise)


def decrypt_poly(sk: SecretKey, ct: Ciphertext) -> Poly:
    """Round the ciphertext back to its mod-t plaintext polynomial."""
    params = sk.params
    n, q, t = params.n, params.q, params.t
    k = _k_ternary(params)
    fs = _cached_ntt(sk._ntt_cache, "s", sk.s.coeffs, q, k)
    fc1 = ntt_residues(split_residues(ct.c1.coeffs, q, k), k)
    c1s = _mul_by_small(fc1, fs, k, n)
    x = (ct.c0.coeffs + c1s) % q
    half = q // 2
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        v = int(x[i])
        if v > half:
            v -= q
        out[i] = ((2 * t * v + q) // (2 * q)) % t
    return Poly(out, t)


def decrypt(sk: SecretKey, ct: Ciphertext) -> np.ndarray:
    """Recover the slot vector (correct while noise < q/2t)."""
    return decode_slots(decrypt_poly(sk, ct), sk.params)


def noise_max_abs(sk: SecretKey, ct: Ciphertext, expected_slots) -> int:
    """Known-plaintext noise probe: max |c0 + c1*s - round(q/t)*m| centered.

    Test harness only; decryption is correct iff this stays below q/2t.
    """
    params = sk.params
    n, q = params.n, params.q
    k = _k_ternary(params)
    fs = _cached_ntt(sk._ntt_cache, "s", sk.s.coeffs, q, k)
    fc1 = ntt_residues(split_residues(ct.c1.coeffs, q, k), k)
    c1s = _mul_by_small(fc1, fs, k, n)
    m_poly = encode_slots(expected_slots, params)
    x = (ct.c0.coeffs + c1s - m_poly.coeffs.astype(object) * _delta_q(params)) % q
    half = q // 2
    worst = 0
    for v in x:
        v = int(v)
        if v > half:
            v -= q
        worst = max(worst, abs(v))
    return worst


def decryption_bound(params: RingParams) -> int:
    return params.q // (2 * params.t)


# ---------------------------------------------------------------------------
# Homomorphic operations


def _check_params(a: Ciphertext, b: Ciphertext):
    if a.params != b.params:
        raise ParameterError("ciphertext parameter mismatch")


def add_ct(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_params(a, b)
    from .ring import poly_add

    return Ciphertext(
        poly_add(a.c0, b.c0), poly_add(a.c1, b.c1), a.params,
        level=min(a.level, b.level),
        noise_bits=max(a.noise_bits, b.noise_bits) + 1,
    )


def sub_ct(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_params(a, b)
    from .ring import poly_sub

    return Ciphertext(
        poly_sub(a.c0, b.c0), poly_sub(a.c1, b.c1), a.params,
        level=min(a.level, b.level),
        noise_bits=max(a.noise_bits, b.noise_bits) + 1,
    )


def add_plain(ct: Ciphertext, values) -> Ciphertext:
    params = ct.params
    m_poly = encode_slots(values, params)
    scaled = (ct.c0.coeffs + m_poly.coeffs.astype(object) * _delta_q(params)) % params.q
    return Ciphertext(Poly(scaled, params.q), ct.c1, params, ct.level, ct.noise_bits)


def mul_plain(ct: Ciphertext, values) -> Ciphertext:
    """Slotwise product with a public Z_t vector (no relinearization needed)."""
    params = ct.params
    n, q, t = params.n, params.q, params.t
    p_enc = encode_slots(values, params)
    # centered plaintext halves the worst-case noise growth
    p_small = np.where(p_enc.coeffs > t // 2, p_enc.coeffs - t, p_enc.coeffs).astype(np.int64)
    k = _k_plain(params)
    fp = ntt_residues(split_residues(p_small, params.t, k), k)
    f0 = ntt_residues(split_residues(ct.c0.coeffs, q, k), k)
    f1 = ntt_residues(split_residues(ct.c1.coeffs, q, k), k)
    c0 = Poly.make(_mul_by_small(f0, fp, k, n), q)
    c1 = Poly.make(_mul_by_small(f1, fp, k, n), q)
    growth = math.log2(math.sqrt(n) * params.t / math.sqrt(12.0))
    return Ciphertext(c0, c1, params, ct.level, ct.noise_bits + growth)


def mul_ct(a: Ciphertext, b: Ciphertext, rlk: RelinKey) -> Ciphertext:
    """Ciphertext-ciphertext product, relinearized back to two components.

    The degree-2 tensor is computed over the exact integers on centered
    representatives, scaled by t/q with rounding, then the quadratic
    component is key-switched using base-2^48 digits.
    """
    _check_params(a, b)
    params = a.params
    n, q, t = params.n, params.q, params.t
    k = _k_tensor(params)
    fa0 = ntt_residues(split_residues(a.c0.coeffs, q, k), k)
    fa1 = ntt_residues(split_residues(a.c1.coeffs, q, k), k)
    if b is a:
        fb0, fb1 = fa0, fa1
    else:
        fb0 = ntt_residues(split_residues(b.c0.coeffs, q, k), k)
        fb1 = ntt_residues(split_residues(b.c1.coeffs, q, k), k)
    tab = _conv_tables(k, n)
    ps2d = tab.ps2d
    e0 = combine_residues(ntt_residues((fa0 * fb0) % ps2d, k, inverse=True), k)
    e1 = combine_residues(
        ntt_residues(((fa0 * fb1) % ps2d + (fa1 * fb0) % ps2d) % ps2d, k, inverse=True), k
    )
    e2 = combine_residues(ntt_residues((fa1 * fb1) % ps2d, k, inverse=True), k)

    def scale(arr):
        out = np.empty(n, dtype=object)
        for i, v in enumerate(arr):
            out[i] = (2 * t * int(v) + q) // (2 * q) % q
        return out

    d0, d1, d2 = scale(e0), scale(e1), scale(e2)
    c0, c1 = _relinearize(d0, d1, d2, rlk)
    growth = math.log2(params.t * math.sqrt(n)) + 1
    return Ciphertext(
        Poly.make(c0, q), Poly.make(c1, q), params,
        level=min(a.level, b.level) - 1,
        noise_bits=max(a.noise_bits, b.noise_bits) + growth,
    )


def _relinearize(d0, d1, d2, rlk: RelinKey):
    """Fold the s^2 component d2 onto (d0, d1) via the key-switch elements."""
    params = rlk.params
    n, q = params.n, params.q
    k = _k_digit(params)
    L = relin_digit_count(params)
    from .ring import obj_to_limbs16

    limbs = obj_to_limbs16(d2 % q, q.bit_length())
    pad = 3 * L - limbs.shape[1]
    if pad > 0:
        limbs = np.concatenate([limbs, np.zeros((n, pad), dtype=np.int64)], axis=1)
    acc0 = np.zeros(n, dtype=object)
    acc1 = np.zeros(n, dtype=object)
    for i in range(L):
        digit = limbs[:, 3 * i] + (limbs[:, 3 * i + 1] << 16) + (limbs[:, 3 * i + 2] << 32)
        fd = ntt_residues(split_residues(digit, 1 << (RELIN_BASE_BITS + 1), k), k)
        bi, ai = rlk.elements[i]
        fbi = _cached_ntt(rlk._ntt_cache, f"b{i}", bi.coeffs, q, k)
        fai = _cached_ntt(rlk._ntt_cache, f"a{i}", ai.coeffs, q, k)
        acc0 = acc0 + _mul_by_small(fbi, fd, k, n)
        acc1 = acc1 + _mul_by_small(fai, fd, k, n)
    return (d0 + acc0) % q, (d1 + acc1) % q


def lift_trivial(p: Poly, params: RingParams) -> Ciphertext:
    """Noiseless embedding of a public plaintext polynomial: (round(q/t)*p, 0)."""
    if p.modulus != params.t or p.ntt:
        raise ParameterError("lift_trivial expects a coefficient-domain mod-t polynomial")
    c0 = Poly.make(p.coeffs.astype(object) * _delta_q(params), params.q)
    return Ciphertext(c0, Poly.zero(params.n, params.q), params, level=3, noise_bits=0.0)


# ---------------------------------------------------------------------------
# Serialization

CT_MAGIC = 0x54434846  # "FHCT"
SK_MAGIC = 0x4B534846  # "FHSK"
PK_MAGIC = 0x4B504846  # "FHPK"
RK_MAGIC = 0x4B524846  # "FHRK"
_HDR = struct.Struct("<IIQ")


def _header(magic: int, params: RingParams) -> bytes:
    return _HDR.pack(magic, 1, params.digest())


def _check_header(data: bytes, magic: int, params: RingParams) -> bytes:
    if len(data) < _HDR.size:
        raise SerializationError("truncated header")
    got_magic, version, digest = _HDR.unpack_from(data)
    if got_magic != magic:
        raise SerializationError(f"bad magic 0x{got_magic:08x}")
    if version != 1:
        raise SerializationError(f"unsupported version {version}")
    if digest != params.digest():
        raise SerializationError("parameter fingerprint mismatch")
    return data[_HDR.size:]


def ciphertext_to_bytes(ct: Ciphertext, params: RingParams) -> bytes:
    return _header(CT_MAGIC, params) + poly_to_bytes(ct.c0, params) + poly_to_bytes(ct.c1, params)


def ciphertext_from_bytes(data: bytes, params: RingParams) -> Ciphertext:
    body = _check_header(data, CT_MAGIC, params)
    psize = poly_byte_size(params, params.q)
    if len(body) != 2 * psize:
        raise SerializationError("bad ciphertext length")
    c0 = poly_from_bytes(body[:psize], params)
    c1 = poly_from_bytes(body[psize:], params)
    return Ciphertext(c0, c1, params)


def ciphertext_byte_size(params: RingParams) -> int:
    return _HDR.size + 2 * poly_byte_size(params, params.q)


def secret_key_to_bytes(sk: SecretKey, params: RingParams) -> bytes:
    return _header(SK_MAGIC, params) + poly_to_bytes(sk.s, params)


def secret_key_from_bytes(data: bytes, params: RingParams) -> SecretKey:
    body = _check_header(data, SK_MAGIC, params)
    return SecretKey(poly_from_bytes(body, params), params)


def public_key_to_bytes(pk: PublicKey, params: RingParams) -> bytes:
    return _header(PK_MAGIC, params) + poly_to_bytes(pk.b, params) + poly_to_bytes(pk.a, params)


def public_key_from_bytes(data: bytes, params: RingParams) -> PublicKey:
    body = _check_header(data, PK_MAGIC, params)
    psize = poly_byte_size(params, params.q)
    return PublicKey(poly_from_bytes(body[:psize], params), poly_from_bytes(body[psize:], params), params)


def relin_key_to_bytes(rlk: RelinKey, params: RingParams) -> bytes:
    parts = [_header(RK_MAGIC, params), struct.pack("<I", len(rlk.elements))]
    for bi, ai in rlk.elements:
        parts.append(poly_to_bytes(bi, params))
        parts.append(poly_to_bytes(ai, params))
    return b"".join(parts)


def relin_key_from_bytes(data: bytes, params: RingParams) -> RelinKey:
    body = _check_header(data, RK_MAGIC, params)
    (count,) = struct.unpack_from("<I", body)
    body = body[4:]
    psize = poly_byte_size(params, params.q)
    if len(body) != count * 2 * psize:
        raise SerializationError("bad relin key length")
    elems = []
    for i in range(count):
        off = i * 2 * psize
        elems.append(
            (poly_from_bytes(body[off : off + psize], params),
             poly_from_bytes(body[off + psize : off + 2 * psize], params))
        )
    return RelinKey(tuple(elems), params)
