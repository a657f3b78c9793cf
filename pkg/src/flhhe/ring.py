"""Exact arithmetic in R_m = Z_m[X]/(X^N + 1) for the two ring moduli.

The ciphertext modulus q is a single ~200-bit prime, so coefficients are
held as Python ints inside object-dtype numpy arrays.  Negacyclic
products are computed exactly by CRT over a fixed ladder of 29-bit NTT
primes (see ``_kernels``), then reduced mod m; the public
``ntt_forward``/``ntt_inverse`` transforms exist for any NTT-compatible
modulus and are what the slot encoding is defined in terms of.

All residues are canonical in [0, m); signed readings use the centered
representative r -> r - m for r > m/2.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ParameterError, SerializationError

# Ciphertext moduli, frozen.  Both are primes p with 2N | p - 1 for every
# ring degree the preset supports (4096 | q_default - 1, 512 | q_toy - 1).
# Sizes were fixed empirically: the depth-3 keystream circuit peaks at
# ~2^177 of noise at N = 2048 (~2^155 at N = 64), so ~2^224 and ~2^192
# leave >20 bits of margin below the q/2t decryption bound at their
# respective degrees.  Serialized coefficient width is 32 bytes for both.
Q_DEFAULT = 2**224 - 933887
Q_TOY = 2**192 - 92159

T_DEFAULT = 65537  # 2^16 + 1, 16-bit plaintext space

# 29-bit primes p = 8192k + 1, descending: NTT-friendly up to N = 4096
# and small enough that products plus 16-term sums stay inside int64.
CRT_PRIMES = (
    536813569, 536690689, 536641537, 536616961, 536608769, 536543233,
    536494081, 536338433, 536322049, 536272897, 536215553, 536174593,
    536166401, 536092673, 536027137, 536002561,
)


def _is_pow2(x: int) -> bool:
    return x > 0 and (x & (x - 1)) == 0


@dataclass(frozen=True)
class RingParams:
    """Global arithmetic parameters shared by every cryptographic object.

    n: ring degree (power of two); q: ciphertext modulus; t: plaintext
    modulus; delta: fixed-point scaling factor; sigma: error stddev;
    k_max: aggregation overflow budget (largest client count whose
    summed quantized weights cannot wrap mod t).
    """

    n: int
    q: int
    t: int
    delta: int
    sigma: float
    k_max: int

    def __post_init__(self):
        if not _is_pow2(self.n) or self.n < 2:
            raise ParameterError(f"ring degree must be a power of two >= 2, got {self.n}")
        if (self.q - 1) % (2 * self.n) != 0:
            raise ParameterError("q - 1 must be divisible by 2N (no 2N-th root of unity mod q)")
        if (self.t - 1) % (2 * self.n) != 0:
            raise ParameterError("t - 1 must be divisible by 2N (no 2N-th root of unity mod t)")
        if self.delta <= 0:
            raise ParameterError("delta must be positive")
        if self.k_max < 1 or self.k_max * self.delta >= self.t // 2:
            raise ParameterError(
                f"overflow budget violated: k_max*delta = {self.k_max * self.delta} "
                f"must stay below t/2 = {self.t // 2}"
            )
        if self.sigma <= 0:
            raise ParameterError("sigma must be positive")

    @property
    def q_word_bytes(self) -> int:
        return word_bytes(self.q)

    @property
    def t_word_bytes(self) -> int:
        return word_bytes(self.t)

    def modulus_id(self, m: int) -> int:
        if m == self.q:
            return 0
        if m == self.t:
            return 1
        raise ParameterError(f"modulus {m} is neither q nor t of these params")

    def modulus_from_id(self, mid: int) -> int:
        if mid == 0:
            return self.q
        if mid == 1:
            return self.t
        raise SerializationError(f"unknown modulus id {mid}")

    def digest(self) -> int:
        """64-bit parameter fingerprint embedded in file headers."""
        text = f"n={self.n};q={self.q};t={self.t};delta={self.delta};sigma={self.sigma};kmax={self.k_max}"
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


PRESETS = {
    "default": dict(n=2048, q=Q_DEFAULT, t=T_DEFAULT, delta=1024, sigma=3.2, k_max=31),
    "toy": dict(n=16, q=Q_TOY, t=T_DEFAULT, delta=1024, sigma=3.2, k_max=31),
}


def preset(name: str, **overrides) -> RingParams:
    if name not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = dict(PRESETS[name])
    cfg.update(overrides)
    return RingParams(**cfg)


def word_bytes(m: int) -> int:
    """Serialized coefficient width: byte length rounded up to a power of two."""
    w = (m.bit_length() + 7) // 8
    p = 1
    while p < w:
        p <<= 1
    return p


# ---------------------------------------------------------------------------
# Polynomials


def _as_coeff_array(values, modulus: int) -> np.ndarray:
    if modulus.bit_length() <= 31:
        arr = np.asarray(values, dtype=np.int64) % modulus
        return arr
    arr = np.array([int(v) % modulus for v in values], dtype=object)
    return arr


@dataclass(frozen=True, eq=False)
class Poly:
    """Length-N coefficient vector mod m with a domain tag.

    ``ntt=False`` means coefficient domain; ``ntt=True`` means the values
    are the evaluations at the odd powers of the 2N-th root of unity
    (natural order).  Arrays are treated as immutable.
    """

    coeffs: np.ndarray
    modulus: int
    ntt: bool = False

    @classmethod
    def make(cls, values, modulus: int, ntt: bool = False) -> "Poly":
        return cls(_as_coeff_array(values, modulus), modulus, ntt)

    @classmethod
    def zero(cls, n: int, modulus: int) -> "Poly":
        return cls.make([0] * n, modulus)

    @property
    def n(self) -> int:
        return len(self.coeffs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Poly):
            return NotImplemented
        return (
            self.modulus == other.modulus
            and self.ntt == other.ntt
            and self.n == other.n
            and bool(np.all(self.coeffs == other.coeffs))
        )

    def __hash__(self):
        return hash((self.modulus, self.ntt, self.n, tuple(int(c) for c in self.coeffs)))

    def centered(self) -> np.ndarray:
        """Signed representatives in (-m/2, m/2] as an object/int64 array."""
        half = self.modulus // 2
        c = self.coeffs
        if c.dtype == object:
            return np.array([int(x) - self.modulus if x > half else int(x) for x in c], dtype=object)
        return np.where(c > half, c - self.modulus, c)


def _check_pair(a: Poly, b: Poly):
    if a.modulus != b.modulus:
        raise ParameterError("modulus mismatch")
    if a.n != b.n:
        raise ParameterError("degree mismatch")
    if a.ntt != b.ntt:
        raise ParameterError("domain mismatch")


def poly_add(a: Poly, b: Poly) -> Poly:
    _check_pair(a, b)
    return Poly((a.coeffs + b.coeffs) % a.modulus, a.modulus, a.ntt)


def poly_sub(a: Poly, b: Poly) -> Poly:
    _check_pair(a, b)
    return Poly((a.coeffs - b.coeffs) % a.modulus, a.modulus, a.ntt)


def poly_neg(a: Poly) -> Poly:
    return Poly((-a.coeffs) % a.modulus, a.modulus, a.ntt)


def poly_mul(a: Poly, b: Poly) -> Poly:
    """Negacyclic product reduced mod (X^N + 1, m), computed exactly."""
    _check_pair(a, b)
    if a.ntt:
        raise ParameterError("poly_mul expects coefficient-domain inputs; use poly_pointwise in NTT domain")
    conv = negacyclic_convolve(a.coeffs, a.modulus, b.coeffs, b.modulus)
    return Poly.make(conv, a.modulus)


def poly_pointwise(a: Poly, b: Poly) -> Poly:
    """Slotwise product of two NTT-domain polynomials."""
    _check_pair(a, b)
    if not a.ntt:
        raise ParameterError("poly_pointwise expects NTT-domain inputs")
    if a.coeffs.dtype == object:
        return Poly((a.coeffs * b.coeffs) % a.modulus, a.modulus, True)
    prod = (a.coeffs.astype(object) * b.coeffs.astype(object)) % a.modulus
    return Poly(prod.astype(np.int64), a.modulus, True)


# ---------------------------------------------------------------------------
# NTT tables

_ROOT_CACHE: dict = {}


def _find_psi(m: int, two_n: int) -> int:
    """Smallest-seed element of multiplicative order exactly 2N mod m."""
    if (m - 1) % two_n != 0:
        raise ParameterError(f"modulus {m} has no primitive {two_n}-th root of unity")
    e = (m - 1) // two_n
    x = 2
    while True:
        y = pow(x, e, m)
        # order divides 2N (a power of two); y^N == -1 pins it to exactly 2N
        if pow(y, two_n // 2, m) == m - 1:
            return y
        x += 1
        if x > 10_000:
            raise ParameterError(f"failed to locate a 2N-th root of unity mod {m}")


def _bitrev_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _stage_twiddles(omega: int, n: int, m: int) -> list:
    """Stage-major table for the iterative NTT: length-L stage holds w^j
    with w = omega^(N/L), j < L/2.  Total size N - 1."""
    table = []
    length = 2
    while length <= n:
        w = pow(omega, n // length, m)
        cur = 1
        for _ in range(length // 2):
            table.append(cur)
            cur = (cur * w) % m
        length <<= 1
    return table


class _NttTables:
    def __init__(self, m: int, n: int):
        psi = _find_psi(m, 2 * n)
        omega = (psi * psi) % m
        self.m = m
        self.n = n
        self.psi_pows = [pow(psi, j, m) for j in range(n)]
        n_inv = pow(n, m - 2, m)
        psi_inv = pow(psi, m - 2, m)
        # untwist and 1/N folded into one per-coefficient factor
        self.untwist = [(pow(psi_inv, j, m) * n_inv) % m for j in range(n)]
        self.fwd = _stage_twiddles(omega, n, m)
        self.inv = _stage_twiddles(pow(omega, m - 2, m), n, m)
        self.brv = _bitrev_indices(n)
        self.small = m.bit_length() <= 29
        if self.small:
            self.psi_pows_i64 = np.array(self.psi_pows, dtype=np.int64)
            self.untwist_i64 = np.array(self.untwist, dtype=np.int64)
            self.fwd_i64 = np.array(self.fwd, dtype=np.int64)
            self.inv_i64 = np.array(self.inv, dtype=np.int64)


def _tables(m: int, n: int) -> _NttTables:
    key = (m, n)
    tab = _ROOT_CACHE.get(key)
    if tab is None:
        tab = _NttTables(m, n)
        _ROOT_CACHE[key] = tab
    return tab


def _ntt_raw_small(rows: np.ndarray, m: int, inverse: bool) -> np.ndarray:
    """Batched negacyclic transform over the last axis, m < 2^29."""
    n = rows.shape[-1]
    tab = _tables(m, n)
    shape = rows.shape
    a = rows.reshape(-1, n)
    if inverse:
        a = a[:, tab.brv].copy()
        _kernels.ntt_rows(a, tab.inv_i64, m)
        a = (a * tab.untwist_i64) % m
    else:
        a = (a * tab.psi_pows_i64) % m
        a = a[:, tab.brv].copy()
        _kernels.ntt_rows(a, tab.fwd_i64, m)
    return a.reshape(shape)


def _ntt_raw_big(values, m: int, inverse: bool) -> list:
    """Single-row negacyclic transform with Python ints (any modulus)."""
    n = len(values)
    tab = _tables(m, n)
    if inverse:
        a = [int(values[i]) % m for i in tab.brv]
        tw = tab.inv
    else:
        a = [(int(values[j]) * tab.psi_pows[j]) % m for j in range(n)]
        a = [a[i] for i in tab.brv]
        tw = tab.fwd
    length = 2
    toff = 0
    while length <= n:
        half = length // 2
        for start in range(0, n, length):
            for j in range(half):
                w = tw[toff + j]
                lo = a[start + j]
                hi = (a[start + half + j] * w) % m
                a[start + j] = (lo + hi) % m
                a[start + half + j] = (lo - hi) % m
        toff += half
        length <<= 1
    if inverse:
        a = [(a[j] * tab.untwist[j]) % m for j in range(n)]
    return a


def ntt_forward(p: Poly) -> Poly:
    """Coefficients -> slot values (evaluations at odd powers of psi)."""
    if p.ntt:
        raise ParameterError("polynomial already in NTT domain")
    m = p.modulus
    if m.bit_length() <= 29:
        out = _ntt_raw_small(p.coeffs.astype(np.int64), m, inverse=False)
        return Poly(out, m, True)
    return Poly(np.array(_ntt_raw_big(p.coeffs, m, inverse=False), dtype=object), m, True)


def ntt_inverse(p: Poly) -> Poly:
    """Slot values -> coefficients; exact inverse of ntt_forward."""
    if not p.ntt:
        raise ParameterError("polynomial already in coefficient domain")
    m = p.modulus
    if m.bit_length() <= 29:
        out = _ntt_raw_small(p.coeffs.astype(np.int64), m, inverse=True)
        return Poly(out, m, False)
    return Poly(np.array(_ntt_raw_big(p.coeffs, m, inverse=True), dtype=object), m, False)


# ---------------------------------------------------------------------------
# Exact negacyclic convolution via CRT over the small prime ladder

_CRT_CACHE: dict = {}
_CONV_CACHE: dict = {}


class _CrtTables:
    def __init__(self, k: int):
        primes = CRT_PRIMES[:k]
        modulus = math.prod(primes)
        self.primes = primes
        self.modulus = modulus
        weights = []
        for p in primes:
            mi = modulus // p
            weights.append(mi * pow(mi % p, p - 2, p))
        # weights as little-endian 16-bit limbs; limb count covers
        # sum_p res_p * w_p < k * 2^29 * modulus
        total_bits = modulus.bit_length() + 29 + k.bit_length()
        nlimbs = (total_bits + 15) // 16 + 1
        self.nlimbs = nlimbs
        wl = np.zeros((k, nlimbs), dtype=np.int64)
        for i, w in enumerate(weights):
            for l in range(nlimbs):
                wl[i, l] = (w >> (16 * l)) & 0xFFFF
        self.weight_limbs = wl


class _ConvTables:
    """Stacked per-prime NTT tables for one (prime count, degree) pair."""

    def __init__(self, k: int, n: int):
        tabs = [_tables(p, n) for p in CRT_PRIMES[:k]]
        self.ps = np.array(CRT_PRIMES[:k], dtype=np.int64)
        self.ps2d = self.ps[:, None]
        self.fwd = np.stack([t.fwd_i64 for t in tabs])
        self.inv = np.stack([t.inv_i64 for t in tabs])
        self.psi = np.stack([t.psi_pows_i64 for t in tabs])
        self.untwist = np.stack([t.untwist_i64 for t in tabs])
        self.brv = tabs[0].brv


def _crt_tables(k: int) -> _CrtTables:
    tab = _CRT_CACHE.get(k)
    if tab is None:
        tab = _CrtTables(k)
        _CRT_CACHE[k] = tab
    return tab


def _conv_tables(k: int, n: int) -> _ConvTables:
    key = (k, n)
    tab = _CONV_CACHE.get(key)
    if tab is None:
        tab = _ConvTables(k, n)
        _CONV_CACHE[key] = tab
    return tab


def _primes_for_bound(bound: int) -> int:
    """Number of ladder primes whose product exceeds 2*bound."""
    acc = 1
    for i, p in enumerate(CRT_PRIMES):
        acc *= p
        if acc > 2 * bound:
            return i + 1
    raise ParameterError("convolution magnitude exceeds the CRT prime ladder")


_POW16_CACHE: dict = {}


def _pow16_table(k: int, nlimbs: int) -> np.ndarray:
    key = (k, nlimbs)
    tab = _POW16_CACHE.get(key)
    if tab is None:
        tab = np.array(
            [[pow(1 << 16, l, p) for l in range(nlimbs)] for p in CRT_PRIMES[:k]],
            dtype=np.int64,
        )
        _POW16_CACHE[key] = tab
    return tab


def obj_to_limbs16(arr: np.ndarray, value_bits: int) -> np.ndarray:
    """Non-negative object-int array -> (n, L) int64 array of 16-bit limbs."""
    width = 2 * ((value_bits + 15) // 16)
    blob = b"".join([int(x).to_bytes(width, "little") for x in arr])
    return np.frombuffer(blob, dtype="<u2").reshape(len(arr), width // 2).astype(np.int64)


def split_residues(canonical: np.ndarray, modulus: int, k: int) -> np.ndarray:
    """Centered residues mod the first k ladder primes, from canonical values.

    Input values are canonical in [0, modulus); the output row for prime p
    holds (v - modulus*(v > modulus/2)) mod p, i.e. residues of the
    centered representatives.
    """
    n = len(canonical)
    half = modulus // 2
    if canonical.dtype != object and modulus.bit_length() <= 31:
        centered = np.where(canonical > half, canonical - modulus, canonical).astype(np.int64)
        return centered[None, :] % np.array(CRT_PRIMES[:k], dtype=np.int64)[:, None]
    limbs = obj_to_limbs16(canonical, modulus.bit_length())
    pows = _pow16_table(k, limbs.shape[1])
    out = np.empty((k, n), dtype=np.int64)
    _kernels.residues_from_limbs(limbs, pows, np.array(CRT_PRIMES[:k], dtype=np.int64), out)
    flags = (canonical > half).astype(np.int64)
    corr = np.array([modulus % p for p in CRT_PRIMES[:k]], dtype=np.int64)
    ps = np.array(CRT_PRIMES[:k], dtype=np.int64)
    return (out - corr[:, None] * flags[None, :]) % ps[:, None]


def combine_residues(res: np.ndarray, k: int) -> np.ndarray:
    """Exact signed values from a residue stack (inverse of split_residues).

    Valid whenever the true magnitudes stay below prod(primes)/2.
    """
    tab = _crt_tables(k)
    n = res.shape[1]
    limbs = np.zeros((n, tab.nlimbs), dtype=np.int64)
    _kernels.limb_combine(res, tab.weight_limbs, limbs)
    raw = limbs.astype("<u2").tobytes()
    width = 2 * tab.nlimbs
    m = tab.modulus
    out = np.array(
        [int.from_bytes(raw[i * width : (i + 1) * width], "little") for i in range(n)],
        dtype=object,
    )
    out %= m
    return np.where(out > m // 2, out - m, out)


def ntt_residues(res: np.ndarray, k: int, inverse: bool = False) -> np.ndarray:
    """Negacyclic NTT of a (k, n) centered-residue stack, rowwise per prime."""
    n = res.shape[1]
    tab = _conv_tables(k, n)
    if inverse:
        a = res[:, tab.brv].copy()
        _kernels.ntt_rows_multi(a, tab.inv, tab.ps)
        return (a * tab.untwist) % tab.ps2d
    a = (res * tab.psi) % tab.ps2d
    a = a[:, tab.brv].copy()
    _kernels.ntt_rows_multi(a, tab.fwd, tab.ps)
    return a


def negacyclic_convolve(a_canonical: np.ndarray, modulus_a: int,
                        b_canonical: np.ndarray, modulus_b: int,
                        bound: int | None = None) -> np.ndarray:
    """Exact negacyclic convolution of the centered representatives."""
    n = len(a_canonical)
    if bound is None:
        bound = n * (modulus_a // 2 + 1) * (modulus_b // 2 + 1)
    k = _primes_for_bound(bound)
    fa = ntt_residues(split_residues(np.asarray(a_canonical), modulus_a, k), k)
    fb = ntt_residues(split_residues(np.asarray(b_canonical), modulus_b, k), k)
    tab = _conv_tables(k, n)
    prod = (fa * fb) % tab.ps2d
    return combine_residues(ntt_residues(prod, k, inverse=True), k)


# ---------------------------------------------------------------------------
# Randomness

def sample_uniform(n: int, m: int, rng: np.random.Generator) -> Poly:
    """Uniform polynomial over Z_m from a caller-owned RNG stream."""
    if m.bit_length() <= 31:
        return Poly(rng.integers(0, m, size=n, dtype=np.int64), m)
    nlimbs = (m.bit_length() + 63) // 64 + 1  # extra limb: modulo bias < 2^-64
    limbs = rng.integers(0, 2**64, size=(nlimbs, n), dtype=np.uint64)
    acc = np.zeros(n, dtype=object)
    for row in limbs[::-1]:
        acc = (acc << 64) | row.astype(object)
    return Poly(acc % m, m)


def sample_ternary(n: int, m: int, rng: np.random.Generator) -> Poly:
    """Uniform {-1, 0, 1} coefficients, stored as canonical residues."""
    return Poly.make(rng.integers(-1, 2, size=n, dtype=np.int64), m)


def sample_gaussian(n: int, m: int, sigma: float, rng: np.random.Generator) -> Poly:
    """Rounded centered Gaussian error polynomial."""
    return Poly.make(np.round(rng.normal(0.0, sigma, size=n)).astype(np.int64), m)


# ---------------------------------------------------------------------------
# Serialization: 8-byte header (magic, N, modulus id) + fixed-width words

POLY_MAGIC = 0x504F  # "PO"


def poly_to_bytes(p: Poly, params: RingParams) -> bytes:
    if p.ntt:
        raise SerializationError("only coefficient-domain polynomials are serialized")
    if p.n != params.n:
        raise SerializationError("polynomial degree does not match params")
    mid = params.modulus_id(p.modulus)
    width = word_bytes(p.modulus)
    header = struct.pack("<HHB3x", POLY_MAGIC, params.n, mid)
    if width <= 8 and p.coeffs.dtype != object:
        body = p.coeffs.astype(f"<u{width}" if width in (1, 2, 4, 8) else "<u8").tobytes()
    else:
        body = b"".join(int(c).to_bytes(width, "little") for c in p.coeffs)
    return header + body


def poly_from_bytes(data: bytes, params: RingParams) -> Poly:
    if len(data) < 8:
        raise SerializationError("truncated polynomial header")
    magic, n, mid = struct.unpack("<HHB3x", data[:8])
    if magic != POLY_MAGIC:
        raise SerializationError(f"bad polynomial magic 0x{magic:04x}")
    if n != params.n:
        raise SerializationError(f"degree mismatch: file has N={n}, params N={params.n}")
    m = params.modulus_from_id(mid)
    width = word_bytes(m)
    body = data[8:]
    if len(body) != n * width:
        raise SerializationError("truncated polynomial body")
    if width in (1, 2, 4, 8):
        vals = np.frombuffer(body, dtype=f"<u{width}").astype(np.int64)
        return Poly.make(vals, m)
    vals = [int.from_bytes(body[i * width : (i + 1) * width], "little") for i in range(n)]
    return Poly.make(vals, m)


def poly_byte_size(params: RingParams, modulus: int) -> int:
    return 8 + params.n * word_bytes(modulus)
