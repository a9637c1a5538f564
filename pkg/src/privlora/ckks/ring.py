from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from .params import AlignmentError, CkksParams

_INT64_SAFE = float(2 ** 62)


@dataclass(frozen=True, eq=False)
class RingElement:
    """An element of Z_Q[X]/(X^N+1) as per-prime residue rows.

    `limbs` lists the indices (into `CkksParams.moduli`) of the rows of `data`.
    """

    data: np.ndarray
    limbs: tuple[int, ...]
    ntt: bool = False

    def check(self, params: CkksParams) -> None:
        if self.data.shape != (len(self.limbs), params.ring_degree):
            raise AlignmentError("ring element shape does not match its limb list")
        q = np.array([params.moduli[i] for i in self.limbs], dtype=np.int64)[:, None]
        if (self.data < 0).any() or (self.data >= q).any():
            raise AlignmentError("residue out of range")

    def to_ntt(self, params: CkksParams) -> RingElement:
        if self.ntt:
            return self
        return RingElement(params.tables.forward(self.data, self.limbs), self.limbs, True)

    def to_coeff(self, params: CkksParams) -> RingElement:
        if not self.ntt:
            return self
        return RingElement(params.tables.inverse(self.data, self.limbs), self.limbs, False)


def moduli_column(params: CkksParams, limbs) -> np.ndarray:
    return np.array([params.moduli[i] for i in limbs], dtype=np.int64)[:, None]


def signed_to_residues(values: np.ndarray, params: CkksParams, limbs) -> np.ndarray:
    """Reduce small signed integers (int64) into residue rows for `limbs`."""
    return np.mod(np.asarray(values, dtype=np.int64)[..., None, :], moduli_column(params, limbs))


def float_to_residues(coeffs: np.ndarray, params: CkksParams, limbs) -> np.ndarray:
    """Round real coefficients to the nearest integers and reduce them mod each limb prime."""
    rounded = np.rint(coeffs)
    if np.max(np.abs(rounded), initial=0.0) < _INT64_SAFE:
        return signed_to_residues(rounded.astype(np.int64), params, limbs)
    big = np.array([int(x) for x in rounded], dtype=object)
    rows = [np.array(big % params.moduli[i], dtype=np.int64) for i in limbs]
    return np.stack(rows)


def centered(x: np.ndarray, q) -> np.ndarray:
    return np.where(x > q // 2, x - q, x)


@lru_cache(maxsize=64)
def _crt_constants(moduli: tuple[int, ...]):
    big_q = 1
    for q in moduli:
        big_q *= q
    hats = [big_q // q for q in moduli]
    hat_invs = [pow(h % q, -1, q) for h, q in zip(hats, moduli)]
    return big_q, hats, hat_invs


def crt_to_float(residues: np.ndarray, params: CkksParams, limbs, divisor: float) -> np.ndarray:
    """Centered CRT reconstruction of residue rows, divided by `divisor`."""
    moduli = tuple(params.moduli[i] for i in limbs)
    if len(moduli) == 1:
        return centered(residues[0], moduli[0]).astype(np.float64) / divisor
    big_q, hats, hat_invs = _crt_constants(moduli)
    tables = params.tables
    acc = np.zeros(residues.shape[-1], dtype=object)
    for row, li, hat, hinv in zip(residues, limbs, hats, hat_invs):
        y = tables.mul(row[None, :], np.full((1, row.shape[-1]), hinv, dtype=np.int64), [li])[0]
        acc = acc + y.astype(object) * hat
    acc = acc % big_q
    acc = np.where(acc > big_q // 2, acc - big_q, acc)
    return acc.astype(np.float64) / divisor


@dataclass(frozen=True, eq=False)
class Plaintext:
    """Encoded slot vector at a given level and scale (coefficient domain)."""

    data: np.ndarray
    level: int
    scale: float
    params: CkksParams

    @property
    def params_fingerprint(self) -> bytes:
        return self.params.fingerprint

    @property
    def element(self) -> RingElement:
        return RingElement(self.data, tuple(range(self.level + 1)))

    @cached_property
    def ntt_data(self) -> np.ndarray:
        return self.params.tables.forward(self.data, self.params.data_limbs(self.level))


@dataclass(frozen=True, eq=False)
class Ciphertext:
    """Two ring elements (c0, c1) stacked in `data`, shape (2, level+1, N), coefficient domain."""

    data: np.ndarray
    level: int
    scale: float
    params: CkksParams

    def __post_init__(self):
        if self.level < 0:
            raise AlignmentError("ciphertext level must be non-negative")
        if not self.scale > 0:
            raise AlignmentError("ciphertext scale must be positive")
        if self.data.shape != (2, self.level + 1, self.params.ring_degree):
            raise AlignmentError(f"ciphertext data shape {self.data.shape} does not match level {self.level}")

    @property
    def params_fingerprint(self) -> bytes:
        return self.params.fingerprint

    @property
    def c0(self) -> RingElement:
        return RingElement(self.data[0], tuple(range(self.level + 1)))

    @property
    def c1(self) -> RingElement:
        return RingElement(self.data[1], tuple(range(self.level + 1)))
