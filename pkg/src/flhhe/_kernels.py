"""Numba-jitted inner loops for modular polynomial arithmetic.

Everything here operates on int64 arrays with moduli below 2**29 so that
all intermediate products stay inside 63 bits.  The public ring API lives
in :mod:`flhhe.ring`; these kernels are implementation detail.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True, nogil=True)
def ntt_rows(a, tw, p):
    """In-place cyclic NTT over the last axis of a 2-D int64 array.

    Rows must already be in bit-reversed order; output is in natural
    order.  ``tw`` is the stage-major twiddle table of length N-1 (stage
    for length L contributes L/2 entries w**j).  All values stay in
    [0, p) with p < 2**29.
    """
    rows, n = a.shape
    for b in prange(rows):
        length = 2
        toff = 0
        while length <= n:
            half = length >> 1
            for start in range(0, n, length):
                for j in range(half):
                    w = tw[toff + j]
                    lo = a[b, start + j]
                    hi = (a[b, start + half + j] * w) % p
                    x = lo + hi
                    if x >= p:
                        x -= p
                    y = lo - hi
                    if y < 0:
                        y += p
                    a[b, start + j] = x
                    a[b, start + half + j] = y
            toff += half
            length <<= 1


@njit(cache=True, parallel=True, nogil=True)
def ntt_rows_multi(a, tws, ps):
    """As ntt_rows, but row r runs under modulus ps[r] with table tws[r]."""
    rows, n = a.shape
    for b in prange(rows):
        p = ps[b]
        length = 2
        toff = 0
        while length <= n:
            half = length >> 1
            for start in range(0, n, length):
                for j in range(half):
                    w = tws[b, toff + j]
                    lo = a[b, start + j]
                    hi = (a[b, start + half + j] * w) % p
                    x = lo + hi
                    if x >= p:
                        x -= p
                    y = lo - hi
                    if y < 0:
                        y += p
                    a[b, start + j] = x
                    a[b, start + half + j] = y
            toff += half
            length <<= 1


@njit(cache=True, parallel=True, nogil=True)
def residues_from_limbs(limbs, pows, ps, out):
    """Reduce base-2^16 limb vectors modulo each ladder prime.

    limbs: (n, L) int64 with values < 2^16, pows: (k, L) powers of 2^16
    mod each prime, ps: (k,) primes, out: (k, n).  Products stay below
    2^45, so sums are safe for L up to ~200.
    """
    k = ps.shape[0]
    n, nlimbs = limbs.shape
    for i in prange(n):
        for pidx in range(k):
            acc = 0
            for l in range(nlimbs):
                acc += limbs[i, l] * pows[pidx, l]
            out[pidx, i] = acc % ps[pidx]


@njit(cache=True, parallel=True, nogil=True)
def mul_rows(out, x, y, p):
    """out = x * y mod p, elementwise on 2-D int64 arrays."""
    rows, n = x.shape
    for b in prange(rows):
        for j in range(n):
            out[b, j] = (x[b, j] * y[b, j]) % p


@njit(cache=True, parallel=True, nogil=True)
def fwd_ntt_batch(a, brv, psis, tws, ps):
    """Forward negacyclic NTT over axis -1 of a (P, B, N) int64 stack.

    Plane r uses prime ps[r], twist psis[r] and stage-major table
    tws[r]; input values must lie in [0, ps[r]).  Output is in natural
    order (twist, bit-reverse, then DIT butterflies).
    """
    nprimes, rows, n = a.shape
    total = nprimes * rows
    for idx in prange(total):
        r = idx // rows
        b = idx % rows
        p = ps[r]
        tmp = np.empty(n, dtype=np.int64)
        for j in range(n):
            tmp[j] = (a[r, b, j] * psis[r, j]) % p
        for j in range(n):
            a[r, b, j] = tmp[brv[j]]
        length = 2
        toff = 0
        while length <= n:
            half = length >> 1
            for start in range(0, n, length):
                for j in range(half):
                    w = tws[r, toff + j]
                    lo = a[r, b, start + j]
                    hi = (a[r, b, start + half + j] * w) % p
                    x = lo + hi
                    if x >= p:
                        x -= p
                    y = lo - hi
                    if y < 0:
                        y += p
                    a[r, b, start + j] = x
                    a[r, b, start + half + j] = y
            toff += half
            length <<= 1


@njit(cache=True, parallel=True, nogil=True)
def fwd_ntt_batch_from_rows(out, rows, brv, psis, tws, ps):
    """fwd_ntt_batch fed from one (B, N) int64 row block (any sign),
    reduced into each prime plane on load."""
    nprimes = ps.shape[0]
    nrows, n = rows.shape
    total = nprimes * nrows
    for idx in prange(total):
        r = idx // nrows
        b = idx % nrows
        p = ps[r]
        tmp = np.empty(n, dtype=np.int64)
        for j in range(n):
            v = rows[b, j] % p
            tmp[j] = (v * psis[r, j]) % p
        for j in range(n):
            out[r, b, j] = tmp[brv[j]]
        length = 2
        toff = 0
        while length <= n:
            half = length >> 1
            for start in range(0, n, length):
                for j in range(half):
                    w = tws[r, toff + j]
                    lo = out[r, b, start + j]
                    hi = (out[r, b, start + half + j] * w) % p
                    x = lo + hi
                    if x >= p:
                        x -= p
                    y = lo - hi
                    if y < 0:
                        y += p
                    out[r, b, start + j] = x
                    out[r, b, start + half + j] = y
            toff += half
            length <<= 1


@njit(cache=True, parallel=True, nogil=True)
def inv_ntt_batch(a, brv, untws, tws, ps):
    """Inverse of fwd_ntt_batch; untws folds psi^-j and 1/N together."""
    nprimes, rows, n = a.shape
    total = nprimes * rows
    for idx in prange(total):
        r = idx // rows
        b = idx % rows
        p = ps[r]
        tmp = np.empty(n, dtype=np.int64)
        for j in range(n):
            tmp[j] = a[r, b, brv[j]]
        for j in range(n):
            a[r, b, j] = tmp[j]
        length = 2
        toff = 0
        while length <= n:
            half = length >> 1
            for start in range(0, n, length):
                for j in range(half):
                    w = tws[r, toff + j]
                    lo = a[r, b, start + j]
                    hi = (a[r, b, start + half + j] * w) % p
                    x = lo + hi
                    if x >= p:
                        x -= p
                    y = lo - hi
                    if y < 0:
                        y += p
                    a[r, b, start + j] = x
                    a[r, b, start + half + j] = y
            toff += half
            length <<= 1
        for j in range(n):
            a[r, b, j] = (a[r, b, j] * untws[r, j]) % p


@njit(cache=True, parallel=True, nogil=True)
def affine_batch(out, state, mats, ps):
    """Slot-parallel affine layer across all ladder primes.

    state/out: (P, 2m, n) NTT-domain residues with the m c0 rows first,
    mats: (P, m*m, n) with multiplier (i, j) at row i*m + j.  Computes
    out[c*m + i] = sum_j mats[i*m + j] * state[c*m + j] mod ps[r]; sums
    are reduced every eight terms to stay inside int64.
    """
    nprimes, twom, n = state.shape
    m = twom // 2
    for idx in prange(nprimes * m):
        r = idx // m
        i = idx % m
        p = ps[r]
        base = i * m
        for c in range(2):
            off = c * m
            for k in range(n):
                acc = 0
                for j in range(m):
                    acc += (mats[r, base + j, k] * state[r, off + j, k]) % p
                    if (j & 7) == 7:
                        acc %= p
                out[r, off + i, k] = acc % p


@njit(cache=True, parallel=True, nogil=True)
def limb_combine(res, wlimbs, out):
    """Accumulate CRT residues against 16-bit weight limbs and normalise.

    res: (P, n) residues below 2**29, wlimbs: (P, L) limbs of the CRT
    reconstruction weights, out: (n, L) uint16-valued int64 limbs of
    sum_p res[p] * weight[p] (exact, little-endian base 2**16).  L must
    be large enough for the full sum including carries.
    """
    nprimes, n = res.shape
    nlimbs = wlimbs.shape[1]
    for k in prange(n):
        for l in range(nlimbs):
            acc = 0
            for pidx in range(nprimes):
                acc += res[pidx, k] * wlimbs[pidx, l]
            out[k, l] = acc
        carry = 0
        for l in range(nlimbs):
            v = out[k, l] + carry
            out[k, l] = v & 0xFFFF
            carry = v >> 16
        # carry must be zero if L was sized correctly


@njit(cache=True, parallel=True, nogil=True)
def keystream_rounds(state, mats, consts, nonlinear, p):
    """One cipher round applied blockwise: state <- M*state + c, then
    optionally state <- state + state*state (all mod p).

    state: (blocks, m), mats: (blocks, m, m), consts: (blocks, m).
    """
    blocks, m = state.shape
    for b in prange(blocks):
        tmp = np.empty(m, dtype=np.int64)
        for i in range(m):
            acc = 0
            for j in range(m):
                acc += (mats[b, i, j] * state[b, j]) % p
                if (j & 7) == 7:
                    acc %= p
            tmp[i] = (acc + consts[b, i]) % p
        if nonlinear:
            for i in range(m):
                v = tmp[i]
                state[b, i] = (v + v * v) % p
        else:
            for i in range(m):
                state[b, i] = tmp[i]
