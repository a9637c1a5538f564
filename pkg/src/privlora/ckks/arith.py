"""Word-size modular arithmetic and the negacyclic NTT over an RNS basis.

Residues live in int64 arrays. Products are reduced with a floating-point
quotient estimate which is off by at most one for moduli below 2**51, so a
single conditional correction on each side lands the wrapped int64 remainder
back in [0, q).
"""

from __future__ import annotations

from functools import lru_cache

import numba
import numpy as np

MAX_MODULUS_BITS = 51


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin for n < 3.3e24."""
    if n < 2:
        return False
    small = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41)
    for p in small:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in small:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def find_ntt_primes(bits: int, ring_degree: int, count: int, exclude=()) -> list[int]:
    """Return `count` distinct primes q < 2**bits with q = 1 mod 2N, largest first."""
    if bits > MAX_MODULUS_BITS:
        raise ValueError(f"moduli above {MAX_MODULUS_BITS} bits are not supported")
    step = 2 * ring_degree
    cand = (1 << bits) - step + 1
    found: list[int] = []
    while len(found) < count:
        if cand < step:
            raise ValueError(f"not enough {bits}-bit NTT primes for N={ring_degree}")
        if cand not in exclude and is_prime(cand):
            found.append(cand)
        cand -= step
    return found


def primitive_root_2n(q: int, n: int) -> int:
    """A primitive 2N-th root of unity mod q (requires q = 1 mod 2N)."""
    cofactor = (q - 1) // (2 * n)
    for g in range(2, q):
        psi = pow(g, cofactor, q)
        if pow(psi, n, q) == q - 1:
            return psi
    raise ValueError(f"no primitive {2 * n}-th root of unity mod {q}")


def bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


# -- kernels ---------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _ntt_fwd_kernel(a, rows_limb, w, wq, qs):
    n_rows, n = a.shape
    for row in range(n_rows):
        li = rows_limb[row]
        q = qs[li]
        t = n
        m = 1
        while m < n:
            t //= 2
            for i in range(m):
                j1 = 2 * i * t
                s = w[li, m + i]
                sq = wq[li, m + i]
                for j in range(j1, j1 + t):
                    u = a[row, j]
                    x = a[row, j + t]
                    v = x * s - np.int64(np.floor(np.float64(x) * sq)) * q
                    if v < 0:
                        v += q
                    elif v >= q:
                        v -= q
                    r1 = u + v
                    if r1 >= q:
                        r1 -= q
                    r2 = u - v
                    if r2 < 0:
                        r2 += q
                    a[row, j] = r1
                    a[row, j + t] = r2
            m *= 2


@numba.njit(cache=True, nogil=True)
def _ntt_inv_kernel(a, rows_limb, w, wq, qs, ninv, ninvq):
    n_rows, n = a.shape
    for row in range(n_rows):
        li = rows_limb[row]
        q = qs[li]
        t = 1
        m = n
        while m > 1:
            h = m // 2
            for i in range(h):
                j1 = 2 * i * t
                s = w[li, h + i]
                sq = wq[li, h + i]
                for j in range(j1, j1 + t):
                    u = a[row, j]
                    v = a[row, j + t]
                    r1 = u + v
                    if r1 >= q:
                        r1 -= q
                    d = u - v
                    if d < 0:
                        d += q
                    r2 = d * s - np.int64(np.floor(np.float64(d) * sq)) * q
                    if r2 < 0:
                        r2 += q
                    elif r2 >= q:
                        r2 -= q
                    a[row, j] = r1
                    a[row, j + t] = r2
            t *= 2
            m = h
        s = ninv[li]
        sq = ninvq[li]
        for j in range(n):
            x = a[row, j]
            r = x * s - np.int64(np.floor(np.float64(x) * sq)) * q
            if r < 0:
                r += q
            elif r >= q:
                r -= q
            a[row, j] = r


@numba.njit(cache=True, nogil=True)
def _mul_kernel(a, b, out, rows_limb, qs, qinvs):
    n_rows, n = a.shape
    for row in range(n_rows):
        li = rows_limb[row]
        q = qs[li]
        qi = qinvs[li]
        for j in range(n):
            x = a[row, j]
            y = b[row, j]
            r = x * y - np.int64(np.floor(np.float64(x) * np.float64(y) * qi)) * q
            if r < 0:
                r += q
            elif r >= q:
                r -= q
            out[row, j] = r


class NttTables:
    """Twiddle tables for a fixed (N, primes) basis.

    Every public method takes arrays shaped (..., L, N) whose axis -2 runs
    over the limbs listed in `limbs` (indices into `primes`).
    """

    def __init__(self, ring_degree: int, primes: tuple[int, ...]):
        n = ring_degree
        self.n = n
        self.primes = primes
        self.qs = np.array(primes, dtype=np.int64)
        self.qinvs = 1.0 / self.qs.astype(np.float64)
        rev = bit_reverse_indices(n)
        fwd = np.empty((len(primes), n), dtype=np.int64)
        inv = np.empty((len(primes), n), dtype=np.int64)
        ninv = np.empty(len(primes), dtype=np.int64)
        for li, q in enumerate(primes):
            psi = primitive_root_2n(q, n)
            fwd[li] = _powers(psi, n, q)[rev]
            inv[li] = _powers(pow(psi, -1, q), n, q)[rev]
            ninv[li] = pow(n, -1, q)
        qf = self.qs.astype(np.float64)[:, None]
        self.fwd = fwd
        self.inv = inv
        self.fwd_q = fwd.astype(np.float64) / qf
        self.inv_q = inv.astype(np.float64) / qf
        self.ninv = ninv
        self.ninv_q = ninv.astype(np.float64) / qf[:, 0]

    def _rows(self, shape, limbs) -> np.ndarray:
        limbs = np.asarray(limbs, dtype=np.int64)
        lead = int(np.prod(shape[:-2], dtype=np.int64))
        return np.tile(limbs, lead)

    def forward(self, a: np.ndarray, limbs) -> np.ndarray:
        out = np.ascontiguousarray(a, dtype=np.int64).copy()
        flat = out.reshape(-1, self.n)
        _ntt_fwd_kernel(flat, self._rows(out.shape, limbs), self.fwd, self.fwd_q, self.qs)
        return out

    def inverse(self, a: np.ndarray, limbs) -> np.ndarray:
        out = np.ascontiguousarray(a, dtype=np.int64).copy()
        flat = out.reshape(-1, self.n)
        _ntt_inv_kernel(flat, self._rows(out.shape, limbs), self.inv, self.inv_q,
                        self.qs, self.ninv, self.ninv_q)
        return out

    def mul(self, a: np.ndarray, b: np.ndarray, limbs) -> np.ndarray:
        """Pointwise product mod each limb's prime; operands broadcast to a common shape."""
        a, b = np.broadcast_arrays(a, b)
        a = np.ascontiguousarray(a, dtype=np.int64)
        b = np.ascontiguousarray(b, dtype=np.int64)
        out = np.empty_like(a)
        _mul_kernel(a.reshape(-1, self.n), b.reshape(-1, self.n), out.reshape(-1, self.n),
                    self._rows(a.shape, limbs), self.qs, self.qinvs)
        return out


def _powers(base: int, n: int, q: int) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    acc = 1
    for i in range(n):
        out[i] = acc
        acc = acc * base % q
    return out


@lru_cache(maxsize=8)
def ntt_tables(ring_degree: int, primes: tuple[int, ...]) -> NttTables:
    return NttTables(ring_degree, primes)
