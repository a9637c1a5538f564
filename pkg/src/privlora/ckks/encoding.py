"""Canonical embedding between slot vectors and real polynomial coefficients.

Slot j holds the evaluation m(zeta**(5**j)) with zeta = exp(i*pi/N), so the
Galois map X -> X**(5**k) rotates slots left by k.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=8)
def _slot_tables(n: int):
    two_n = 2 * n
    slots = n // 2
    powers = np.empty(slots, dtype=np.int64)
    acc = 1
    for j in range(slots):
        powers[j] = acc
        acc = acc * 5 % two_n
    # evaluation index u corresponds to the odd exponent 2u+1
    pos = (powers - 1) // 2
    neg = (two_n - powers - 1) // 2
    k = np.arange(n)
    twist = np.exp(1j * np.pi * k / n)
    return pos, neg, twist


def slots_to_coeffs(values: np.ndarray, n: int) -> np.ndarray:
    """Inverse canonical embedding: slot vector (length <= N/2) -> real coefficients."""
    pos, neg, twist = _slot_tables(n)
    z = np.zeros(n // 2, dtype=np.complex128)
    z[: len(values)] = values
    w = np.empty(n, dtype=np.complex128)
    w[pos] = z
    w[neg] = np.conj(z)
    v = np.fft.fft(w) / n
    return np.real(v * np.conj(twist))


def coeffs_to_slots(coeffs: np.ndarray, n: int) -> np.ndarray:
    pos, _, twist = _slot_tables(n)
    w = n * np.fft.ifft(np.asarray(coeffs, dtype=np.float64) * twist)
    return w[pos]


def galois_element(step: int, n: int) -> int:
    """Galois element realising a left rotation of the slot vector by `step`."""
    return pow(5, step % (n // 2), 2 * n)


@lru_cache(maxsize=256)
def automorphism_map(g: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Destination index and sign for X**i -> X**(i*g) in Z[X]/(X**N + 1)."""
    i = np.arange(n)
    dest = (i * g) % (2 * n)
    negate = dest >= n
    dest = np.where(negate, dest - n, dest)
    return dest, negate
