"""Additive stream cipher over Z_t with multiplicative depth 3.

Keystream blocks are produced by four public affine layers (16x16
matrices and constants derived per block from a nonce-seeded XOF) with
an elementwise x + x^2 between the first three, so the whole block is a
degree-8 polynomial in the 16-lane key.  The identical function can be
evaluated under the homomorphic scheme (see ``transcipher``), which is
the entire reason this cipher exists.

This is a toy construction with NO security claim whatsoever: it gives
the transciphering pipeline a real depth-3 workload with a public,
reproducible schedule.  The interface is deliberately small so a vetted
cipher could be slotted in behind it.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ParameterError, SerializationError
from .ring import RingParams

M_LANES = 16
N_ROUNDS = 4  # three nonlinear rounds plus a final affine layer
NONCE_BYTES = 16
SCHEDULE_XOF = "shake_128"  # fixed by name so client and server agree bit-exactly
SCHEDULE_DOMAIN = b"flhhe/schedule/v1"

# words-per-schedule: one 16x16 matrix plus 16 constants
_WORDS_PER_SCHEDULE = M_LANES * M_LANES + M_LANES
_REJECT_LIMIT_FACTOR = {}  # modulus -> largest multiple of t below 2^32


def _reject_limit(t: int) -> int:
    lim = _REJECT_LIMIT_FACTOR.get(t)
    if lim is None:
        lim = (2**32 // t) * t
        _REJECT_LIMIT_FACTOR[t] = lim
    return lim


@dataclass(frozen=True)
class SymKey:
    """16 lanes of Z_t; one per client, never shared."""

    lanes: tuple

    def __post_init__(self):
        if len(self.lanes) != M_LANES:
            raise ParameterError(f"symmetric key must have {M_LANES} lanes")

    def as_array(self) -> np.ndarray:
        return np.array(self.lanes, dtype=np.int64)


def gen_sym_key(t: int, rng: np.random.Generator) -> SymKey:
    return SymKey(tuple(int(x) for x in rng.integers(0, t, M_LANES)))


@dataclass(frozen=True)
class SymCiphertext:
    """Quantized message masked by the keystream, elementwise mod t."""

    values: np.ndarray
    count: int


def check_nonce(nonce: bytes):
    if not isinstance(nonce, (bytes, bytearray)) or len(nonce) != NONCE_BYTES:
        raise ParameterError(f"nonce must be {NONCE_BYTES} bytes")


# ---------------------------------------------------------------------------
# Public round schedule


def _xof_words(nonce: bytes, block: int, round_index: int, nwords: int, t: int) -> np.ndarray:
    """Accepted 4-byte words from the (nonce, block, round) XOF stream.

    Words at or above the largest multiple of t below 2^32 are skipped;
    with t = 2^16+1 that multiple is 2^32-1, so only the all-ones word is
    ever rejected.
    """
    seed = SCHEDULE_DOMAIN + nonce + struct.pack("<II", block, round_index)
    xof = hashlib.new(SCHEDULE_XOF, seed)
    limit = _reject_limit(t)
    length = 4 * (nwords + 4)
    while True:
        words = np.frombuffer(xof.digest(length), dtype="<u4")
        accepted = words[words < limit]
        if len(accepted) >= nwords:
            out = accepted[:nwords]
            break
        length *= 2  # astronomically rare; re-squeeze a longer stream
    return out.astype(np.int64)


def derive_schedule(nonce: bytes, block: int, round_index: int, t: int = 65537):
    """(matrix, constants) for one block and round, uniform over Z_t.

    Key-independent and publicly recomputable: both sides derive the
    same values from the nonce alone.
    """
    check_nonce(bytes(nonce))
    if not (1 <= round_index <= N_ROUNDS):
        raise ParameterError(f"round index must be in 1..{N_ROUNDS}")
    words = _xof_words(bytes(nonce), block, round_index, _WORDS_PER_SCHEDULE, t) % t
    mat = words[: M_LANES * M_LANES].reshape(M_LANES, M_LANES)
    consts = words[M_LANES * M_LANES :]
    return mat, consts


def schedule_for_blocks(nonce: bytes, n_blocks: int, t: int = 65537):
    """All round schedules for blocks 0..n_blocks-1.

    Returns (mats, consts) with shapes (N_ROUNDS, n_blocks, m, m) and
    (N_ROUNDS, n_blocks, m).
    """
    check_nonce(bytes(nonce))
    mats = np.empty((N_ROUNDS, n_blocks, M_LANES, M_LANES), dtype=np.int64)
    consts = np.empty((N_ROUNDS, n_blocks, M_LANES), dtype=np.int64)
    for r in range(N_ROUNDS):
        for b in range(n_blocks):
            m, c = derive_schedule(nonce, b, r + 1, t)
            mats[r, b] = m
            consts[r, b] = c
    return mats, consts


# ---------------------------------------------------------------------------
# Keystream


def keystream_blocks(key: SymKey, nonce: bytes, n_blocks: int, t: int = 65537) -> np.ndarray:
    """Keystream for blocks 0..n_blocks-1, shape (n_blocks, m).

    state <- k; for r = 1..3: state <- M_r*state + c_r, then
    state <- state + state*state; finally state <- M_4*state + c_4.
    """
    mats, consts = schedule_for_blocks(nonce, n_blocks, t)
    state = np.tile(key.as_array() % t, (n_blocks, 1))
    for r in range(N_ROUNDS):
        nonlinear = r < N_ROUNDS - 1
        _kernels.keystream_rounds(state, mats[r], consts[r], nonlinear, t)
    return state


def keystream_block(key: SymKey, nonce: bytes, block: int, t: int = 65537) -> np.ndarray:
    """Single keystream block; element i is lane i."""
    mats, consts = (np.empty((1, M_LANES, M_LANES), dtype=np.int64),
                    np.empty((1, M_LANES), dtype=np.int64))
    state = key.as_array()[None, :] % t
    state = state.copy()
    for r in range(1, N_ROUNDS + 1):
        m, c = derive_schedule(nonce, block, r, t)
        mats[0], consts[0] = m, c
        _kernels.keystream_rounds(state, mats, consts, r < N_ROUNDS, t)
    return state[0]


# ---------------------------------------------------------------------------
# Encryption: c = (message + keystream) mod t, block-major layout


def max_message_len(params: RingParams) -> int:
    return M_LANES * params.n


def apply_keystream(z_blocks: np.ndarray, msg, params: RingParams) -> SymCiphertext:
    """Online masking step given a pregenerated keystream block matrix."""
    msg = np.asarray(msg, dtype=np.int64) % params.t
    if len(msg) > max_message_len(params):
        raise ParameterError(
            f"message of {len(msg)} elements exceeds one batch "
            f"({M_LANES}*{params.n} = {max_message_len(params)}); splitting is unsupported"
        )
    z = z_blocks.reshape(-1)[: len(msg)]
    return SymCiphertext(((msg + z) % params.t).astype(np.int64), len(msg))


def sym_encrypt(key: SymKey, nonce: bytes, msg, params: RingParams) -> SymCiphertext:
    """Mask a Z_t vector with the keystream.

    Element j is covered by block j // m, lane j % m, so slot s of the
    server's evaluated keystream ciphertexts lines up with block s.
    """
    msg = np.asarray(msg, dtype=np.int64) % params.t
    if len(msg) > max_message_len(params):
        raise ParameterError(
            f"message of {len(msg)} elements exceeds one batch "
            f"({M_LANES}*{params.n} = {max_message_len(params)}); splitting is unsupported"
        )
    n_blocks = (len(msg) + M_LANES - 1) // M_LANES
    return apply_keystream(keystream_blocks(key, nonce, n_blocks, params.t), msg, params)


def sym_decrypt(key: SymKey, nonce: bytes, ct: SymCiphertext, params: RingParams) -> np.ndarray:
    """Inverse of sym_encrypt."""
    n_blocks = (ct.count + M_LANES - 1) // M_LANES
    z = keystream_blocks(key, nonce, n_blocks, params.t).reshape(-1)[: ct.count]
    return ((ct.values - z) % params.t).astype(np.int64)


# ---------------------------------------------------------------------------
# Serialization: header + little-endian 4-byte words per element

SC_MAGIC = 0x43534846  # "FHSC"
YK_MAGIC = 0x4B594846  # "FHYK"
_HDR = struct.Struct("<IIQ")


def sym_ciphertext_to_bytes(ct: SymCiphertext) -> bytes:
    return _HDR.pack(SC_MAGIC, 1, ct.count) + ct.values.astype("<u4").tobytes()


def sym_ciphertext_from_bytes(data: bytes) -> SymCiphertext:
    if len(data) < _HDR.size:
        raise SerializationError("truncated symmetric ciphertext")
    magic, version, count = _HDR.unpack_from(data)
    if magic != SC_MAGIC or version != 1:
        raise SerializationError("bad symmetric ciphertext header")
    body = data[_HDR.size :]
    if len(body) != 4 * count:
        raise SerializationError("bad symmetric ciphertext length")
    return SymCiphertext(np.frombuffer(body, dtype="<u4").astype(np.int64), count)


def sym_ciphertext_byte_size(count: int) -> int:
    return _HDR.size + 4 * count


def sym_key_to_bytes(key: SymKey) -> bytes:
    return _HDR.pack(YK_MAGIC, 1, M_LANES) + key.as_array().astype("<u4").tobytes()


def sym_key_from_bytes(data: bytes) -> SymKey:
    if len(data) < _HDR.size:
        raise SerializationError("truncated symmetric key")
    magic, version, count = _HDR.unpack_from(data)
    if magic != YK_MAGIC or version != 1 or count != M_LANES:
        raise SerializationError("bad symmetric key header")
    body = data[_HDR.size :]
    if len(body) != 4 * count:
        raise SerializationError("bad symmetric key length")
    return SymKey(tuple(int(x) for x in np.frombuffer(body, dtype="<u4")))
