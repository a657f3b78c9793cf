"""Symmetric-to-homomorphic conversion and blind aggregation.

The server holds an encryption of each client's symmetric key.  In the
offline phase it regenerates that client's keystream homomorphically
(slot s of the output ciphertexts carries block s, so the layout never
needs to move between slots or coefficients).  Online, a masked upload
is lifted noiselessly into ciphertext space, the evaluated keystream is
subtracted, and the resulting per-client ciphertexts are summed
lane-wise.  Division by the client count happens after decryption, at
dequantization, which keeps the whole server side exact mod-t integer
arithmetic.

The homomorphic keystream evaluation below does not go through the
one-ciphertext-at-a-time API in ``lhe``: all sixteen lanes move through
the rounds together as residue stacks so the heavy transforms batch.
Results are bit-identical to composing the public operations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import OverflowBudgetError, ParameterError, SerializationError
from .lhe import (
    Ciphertext,
    PublicKey,
    RelinKey,
    _cached_ntt,
    _delta_q,
    _k_digit,
    _k_plain,
    _k_tensor,
    _HDR,
    relin_digit_count,
    ciphertext_byte_size,
    ciphertext_from_bytes,
    ciphertext_to_bytes,
    encrypt,
)
from .ring import (
    Poly,
    RingParams,
    _conv_tables,
    _ntt_raw_small,
    combine_residues,
    obj_to_limbs16,
    split_residues,
)
from .shallowstream import (
    M_LANES,
    N_ROUNDS,
    SymCiphertext,
    SymKey,
    check_nonce,
    schedule_for_blocks,
)


@dataclass(eq=False)
class EncSymKey:
    """m ciphertexts; ciphertext i encrypts the constant vector (k_i, ..., k_i)."""

    lanes: tuple  # tuple[Ciphertext, ...]

    def __post_init__(self):
        if len(self.lanes) != M_LANES:
            raise ParameterError(f"encrypted symmetric key must have {M_LANES} lanes")


@dataclass(frozen=True, eq=False)
class KeystreamLane:
    """One evaluated-keystream ciphertext tagged with its lane index."""

    index: int
    ct: Ciphertext


@dataclass(frozen=True, eq=False)
class LiftedLane:
    """One noiselessly lifted upload lane tagged with its lane index."""

    index: int
    ct: Ciphertext


@dataclass(eq=False)
class EvalKeystream:
    """m ciphertexts; ciphertext i holds keystream lane i of block s in slot s."""

    lanes: tuple  # tuple[Ciphertext, ...]

    def lane(self, i: int) -> KeystreamLane:
        return KeystreamLane(i, self.lanes[i])


def encrypt_sym_key(pk: PublicKey, key: SymKey, rng: np.random.Generator) -> EncSymKey:
    """Broadcast-encrypt each key lane into its own ciphertext."""
    n = pk.params.n
    cts = []
    for k_i in key.lanes:
        cts.append(encrypt(pk, np.full(n, int(k_i), dtype=np.int64), rng))
    return EncSymKey(tuple(cts))


# ---------------------------------------------------------------------------
# Lane packing shared by the plain-HE upload path and all reads


def pack_lanes(values, params: RingParams) -> np.ndarray:
    """Element j -> (block j//m, lane j%m); returns (m, N) slot matrix.

    Unused trailing slots are zero; reads must go through unpack_lanes.
    """
    values = np.asarray(values, dtype=np.int64) % params.t
    count = len(values)
    if count > M_LANES * params.n:
        raise ParameterError("message exceeds one batch")
    blocks = (count + M_LANES - 1) // M_LANES
    padded = np.zeros(blocks * M_LANES, dtype=np.int64)
    padded[:count] = values
    out = np.zeros((M_LANES, params.n), dtype=np.int64)
    out[:, :blocks] = padded.reshape(blocks, M_LANES).T
    return out


def unpack_lanes(lane_slots: np.ndarray, count: int) -> np.ndarray:
    """Inverse of pack_lanes for the first ``count`` elements."""
    m, n = lane_slots.shape
    return lane_slots.T.reshape(m * n)[:count].copy()


# ---------------------------------------------------------------------------
# Server offline phase: homomorphic keystream evaluation
#
# All sixteen lanes travel together as (primes, rows, N) int64 stacks so
# the NTTs, pointwise products, and CRT recombinations batch into a
# handful of kernel calls per round.


def _stack_polys(cts, which: int) -> np.ndarray:
    return np.stack([(ct.c0 if which == 0 else ct.c1).coeffs for ct in cts])


def _fwd_stack_from_obj(rows_obj: np.ndarray, modulus: int, k: int) -> np.ndarray:
    """(B, N) object coefficient rows -> (k, B, N) NTT-domain residues."""
    B, n = rows_obj.shape
    res = split_residues(rows_obj.reshape(-1), modulus, k)
    arr = np.ascontiguousarray(res.reshape(k, B, n))
    tab = _conv_tables(k, n)
    _kernels.fwd_ntt_batch(arr, tab.brv, tab.psi, tab.fwd, tab.ps)
    return arr


def _fwd_stack_from_i64(rows: np.ndarray, k: int) -> np.ndarray:
    """(B, N) small int64 rows (any sign) -> (k, B, N) NTT-domain residues."""
    B, n = rows.shape
    tab = _conv_tables(k, n)
    out = np.empty((k, B, n), dtype=np.int64)
    _kernels.fwd_ntt_batch_from_rows(out, np.ascontiguousarray(rows), tab.brv, tab.psi, tab.fwd, tab.ps)
    return out


def _inv_stack(arr: np.ndarray, k: int) -> np.ndarray:
    """In-place inverse transform of a (k, B, N) NTT-domain stack."""
    n = arr.shape[2]
    tab = _conv_tables(k, n)
    _kernels.inv_ntt_batch(arr, tab.brv, tab.untwist, tab.inv, tab.ps)
    return arr


def _combine_stack(arr: np.ndarray, k: int, modulus: int | None = None) -> np.ndarray:
    """(k, B, N) coefficient-domain residues -> (B, N) object rows.

    Values are the exact signed integers; pass ``modulus`` to reduce.
    """
    _, B, n = arr.shape
    vals = combine_residues(np.ascontiguousarray(arr).reshape(k, B * n), k)
    if modulus is not None:
        vals = vals % modulus
    return vals.reshape(B, n)


def _encode_rows_mod_t(slot_rows: np.ndarray, params: RingParams) -> np.ndarray:
    """Batched slot vectors -> centered plaintext coefficient rows (int64)."""
    coeffs = _ntt_raw_small(slot_rows.astype(np.int64) % params.t, params.t, inverse=True)
    t = params.t
    return np.where(coeffs > t // 2, coeffs - t, coeffs)


def _batched_square(c0s: np.ndarray, c1s: np.ndarray, rlk: RelinKey, params: RingParams):
    """Relinearized squares of m ciphertexts given as object coefficient rows."""
    n, q, t = params.n, params.q, params.t
    m = c0s.shape[0]
    k = _k_tensor(params)
    tab = _conv_tables(k, n)
    f = _fwd_stack_from_obj(np.concatenate([c0s, c1s]), q, k)
    f0, f1 = f[:, :m], f[:, m:]
    ps = tab.ps[:, None, None]
    e0 = (f0 * f0) % ps
    e1 = (2 * ((f0 * f1) % ps)) % ps
    e2 = (f1 * f1) % ps
    stacked = np.ascontiguousarray(np.concatenate([e0, e1, e2], axis=1))
    exact = _combine_stack(_inv_stack(stacked, k), k)

    # nearest rounding of t*v/q, ties away from the floor
    scaled = ((2 * t * exact + q) // (2 * q)) % q
    d0, d1, d2 = scaled[:m], scaled[m : 2 * m], scaled[2 * m :]
    r0, r1 = _batched_relin(d2, rlk, params)
    return (d0 + r0) % q, (d1 + r1) % q


def _batched_relin(d2: np.ndarray, rlk: RelinKey, params: RingParams):
    """Key-switch a batch of s^2 components; returns object row additions."""
    n, q = params.n, params.q
    m = d2.shape[0]
    k = _k_digit(params)
    tab = _conv_tables(k, n)
    L = relin_digit_count(params)
    limbs = obj_to_limbs16(d2.reshape(-1) % q, q.bit_length()).reshape(m, n, -1)
    pad = 3 * L - limbs.shape[2]
    if pad > 0:
        limbs = np.concatenate([limbs, np.zeros((m, n, pad), dtype=np.int64)], axis=2)
    ps = tab.ps[:, None, None]
    acc0 = np.zeros((k, m, n), dtype=np.int64)
    acc1 = np.zeros((k, m, n), dtype=np.int64)
    for i in range(L):
        digits = limbs[:, :, 3 * i] + (limbs[:, :, 3 * i + 1] << 16) + (limbs[:, :, 3 * i + 2] << 32)
        fd = _fwd_stack_from_i64(digits, k)
        bi, ai = rlk.elements[i]
        fbi = _cached_ntt(rlk._ntt_cache, f"b{i}", bi.coeffs, q, k)
        fai = _cached_ntt(rlk._ntt_cache, f"a{i}", ai.coeffs, q, k)
        acc0 = (acc0 + (fd * fbi[:, None, :]) % ps) % ps
        acc1 = (acc1 + (fd * fai[:, None, :]) % ps) % ps
    r0 = _combine_stack(_inv_stack(acc0, k), k, q)
    r1 = _combine_stack(_inv_stack(acc1, k), k, q)
    return r0, r1


def eval_keystream(rlk: RelinKey, enc_key: EncSymKey, nonce: bytes, params: RingParams,
                   schedule_override=None) -> EvalKeystream:
    """Server offline phase: run the cipher rounds under encryption.

    Affine layers become slotwise plaintext multiplications (slot s of
    the multiplier holds that block's matrix entry) plus constant adds;
    the nonlinear layer is ct <- ct + ct*ct with relinearization.
    Depends only on (enc_key, nonce), never on any message.

    ``schedule_override`` is a test hook: a (mats, consts) pair replacing
    the nonce-derived schedule, e.g. identity layers to isolate the
    nonlinear recurrence.
    """
    check_nonce(bytes(nonce))
    n, q, t = params.n, params.q, params.t
    m = M_LANES
    delta_q = _delta_q(params)
    if schedule_override is not None:
        mats, consts = schedule_override
    else:
        mats, consts = schedule_for_blocks(bytes(nonce), n, t)

    c0s = _stack_polys(list(enc_key.lanes), 0)
    c1s = _stack_polys(list(enc_key.lanes), 1)

    k = _k_plain(params)
    tab = _conv_tables(k, n)
    for r in range(N_ROUNDS):
        # multiplier (i, j) has slot s = M_{r+1, s}[i, j]
        pt_slots = mats[r].transpose(1, 2, 0).reshape(m * m, n)
        fpt = _fwd_stack_from_i64(_encode_rows_mod_t(pt_slots, params), k)
        fstate = _fwd_stack_from_obj(np.concatenate([c0s, c1s]), q, k)
        out = np.empty_like(fstate)
        _kernels.affine_batch(out, fstate, fpt, tab.ps)
        rows = _combine_stack(_inv_stack(out, k), k, q)
        c0s = rows[:m]
        c1s = rows[m:]

        # constants: slot s of lane i holds c_{r+1, s}[i]
        const_coeff = _encode_rows_mod_t(consts[r].T, params) % t
        c0s = (c0s + const_coeff.astype(object) * delta_q) % q

        if r < N_ROUNDS - 1:
            s0, s1 = _batched_square(c0s, c1s, rlk, params)
            c0s = (c0s + s0) % q
            c1s = (c1s + s1) % q

    lanes = []
    for i in range(m):
        lanes.append(
            Ciphertext(Poly(c0s[i], q), Poly(c1s[i], q), params, level=0,
                       noise_bits=float(params.q.bit_length() - params.t.bit_length() - 24))
        )
    return EvalKeystream(tuple(lanes))


# ---------------------------------------------------------------------------
# Server online phase


def lift_upload(sym_ct: SymCiphertext, params: RingParams):
    """Noiselessly lift each lane of a masked upload into ciphertext space."""
    from .lhe import lift_trivial

    lanes = pack_lanes(sym_ct.values, params)
    out = []
    coeffs = _ntt_raw_small(lanes % params.t, params.t, inverse=True)
    for i in range(M_LANES):
        ct = lift_trivial(Poly(coeffs[i].astype(np.int64), params.t), params)
        out.append(LiftedLane(i, ct))
    return tuple(out)


def decomp_lane(lifted: LiftedLane, z: KeystreamLane) -> Ciphertext:
    """One lane of the online conversion: lifted upload minus keystream."""
    if lifted.index != z.index:
        raise ParameterError(f"lane mismatch: lifted lane {lifted.index} vs keystream lane {z.index}")
    from .lhe import sub_ct

    return sub_ct(lifted.ct, z.ct)


def decomp(sym_ct: SymCiphertext, eval_ks: EvalKeystream, params: RingParams):
    """Full online conversion of one upload; returns m lane ciphertexts
    whose slot s decodes to message element s*m + lane."""
    lifted = lift_upload(sym_ct, params)
    return tuple(decomp_lane(lifted[i], eval_ks.lane(i)) for i in range(M_LANES))


def hhe_eval_sum(client_lanes, params: RingParams):
    """Lane-aligned homomorphic sum over clients (division deferred).

    client_lanes: sequence of per-client m-tuples of ciphertexts.
    Exact modular addition is associative, so fold order cannot matter.
    """
    from .lhe import add_ct

    k_clients = len(client_lanes)
    if k_clients < 1:
        raise ParameterError("need at least one client")
    if k_clients > params.k_max:
        raise OverflowBudgetError(
            f"{k_clients} clients would overflow the aggregation budget (k_max={params.k_max})"
        )
    acc = list(client_lanes[0])
    for lanes in client_lanes[1:]:
        acc = [add_ct(a, b) for a, b in zip(acc, lanes)]
    return tuple(acc)


# ---------------------------------------------------------------------------
# Serialization

EK_MAGIC = 0x4B454846  # "FHEK"
VS_MAGIC = 0x53564846  # "FHVS" (evaluated keystream / aggregated lanes)


def _lanes_to_bytes(magic: int, cts, params: RingParams) -> bytes:
    parts = [_HDR.pack(magic, 1, params.digest()), struct.pack("<I", len(cts))]
    for ct in cts:
        parts.append(ciphertext_to_bytes(ct, params))
    return b"".join(parts)


def _lanes_from_bytes(magic: int, data: bytes, params: RingParams):
    if len(data) < _HDR.size + 4:
        raise SerializationError("truncated lane bundle")
    got, version, digest = _HDR.unpack_from(data)
    if got != magic or version != 1:
        raise SerializationError("bad lane bundle header")
    if digest != params.digest():
        raise SerializationError("parameter fingerprint mismatch")
    (count,) = struct.unpack_from("<I", data, _HDR.size)
    body = data[_HDR.size + 4 :]
    csize = ciphertext_byte_size(params)
    if len(body) != count * csize:
        raise SerializationError("bad lane bundle length")
    return tuple(
        ciphertext_from_bytes(body[i * csize : (i + 1) * csize], params) for i in range(count)
    )


def enc_sym_key_to_bytes(ek: EncSymKey, params: RingParams) -> bytes:
    return _lanes_to_bytes(EK_MAGIC, ek.lanes, params)


def enc_sym_key_from_bytes(data: bytes, params: RingParams) -> EncSymKey:
    return EncSymKey(_lanes_from_bytes(EK_MAGIC, data, params))


def lane_bundle_to_bytes(cts, params: RingParams) -> bytes:
    return _lanes_to_bytes(VS_MAGIC, tuple(cts), params)


def lane_bundle_from_bytes(data: bytes, params: RingParams):
    return _lanes_from_bytes(VS_MAGIC, data, params)


def lane_bundle_byte_size(params: RingParams, count: int = M_LANES) -> int:
    return _HDR.size + 4 + count * ciphertext_byte_size(params)
