from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from functools import cached_property

from .arith import MAX_MODULUS_BITS, find_ntt_primes, is_prime, ntt_tables


class CkksError(ValueError):
    """Base class for all scheme errors."""


class ParameterError(CkksError):
    pass


class CapacityError(CkksError):
    pass


class KeyMismatchError(CkksError):
    """Wrong key, missing rotation key, or fingerprint mismatch."""


class LevelError(CkksError):
    pass


class AlignmentError(CkksError):
    """Operands disagree on level or scale."""


# Three plaintext multiplications per encrypted LoRA call.
PIPELINE_DEPTH = 3

DEFAULT_BITS = (51, 40, 40, 40, 51)


@dataclass(frozen=True, eq=False)
class CkksParams:
    """Ring degree, RNS modulus chain and encoding scale.

    `moduli[:-1]` are the data primes q_0..q_L (q_0 is the base prime that
    survives every rescale); `moduli[-1]` is the special prime used only for
    key switching.
    """

    ring_degree: int
    moduli: tuple[int, ...]
    scale_bits: int = 40

    def __post_init__(self):
        n = self.ring_degree
        if n < 4 or n & (n - 1):
            raise ParameterError(f"ring degree must be a power of two >= 4, got {n}")
        if len(self.moduli) < PIPELINE_DEPTH + 2:
            raise ParameterError(f"modulus chain needs at least {PIPELINE_DEPTH + 2} primes "
                                 f"(depth {PIPELINE_DEPTH} plus base and special prime)")
        if len(set(self.moduli)) != len(self.moduli):
            raise ParameterError("moduli must be distinct")
        for q in self.moduli:
            if q.bit_length() > MAX_MODULUS_BITS:
                raise ParameterError(f"modulus {q} exceeds {MAX_MODULUS_BITS} bits")
            if q % (2 * n) != 1 or not is_prime(q):
                raise ParameterError(f"{q} is not an NTT-friendly prime for N={n}")
        if not 1 <= self.scale_bits < self.moduli[0].bit_length():
            raise ParameterError("scale must be smaller than the base prime")

    @classmethod
    def generate(cls, ring_degree: int = 8192, bits=DEFAULT_BITS, scale_bits: int = 40) -> CkksParams:
        """Pick NTT-friendly primes with the requested bit sizes (special prime last)."""
        if ring_degree < 4 or ring_degree & (ring_degree - 1):
            raise ParameterError(f"ring degree must be a power of two >= 4, got {ring_degree}")
        chosen: list[int] = []
        for b in bits:
            chosen.extend(find_ntt_primes(b, ring_degree, 1, exclude=set(chosen)))
        return cls(ring_degree, tuple(chosen), scale_bits)

    @property
    def slot_count(self) -> int:
        return self.ring_degree // 2

    @property
    def max_level(self) -> int:
        return len(self.moduli) - 2

    @property
    def special_index(self) -> int:
        return len(self.moduli) - 1

    @property
    def scale(self) -> float:
        return float(2 ** self.scale_bits)

    @property
    def tables(self):
        return ntt_tables(self.ring_degree, self.moduli)

    def data_limbs(self, level: int) -> list[int]:
        return list(range(level + 1))

    def key_limbs(self, level: int) -> list[int]:
        return list(range(level + 1)) + [self.special_index]

    def to_bytes(self) -> bytes:
        return struct.pack(f"<III{len(self.moduli)}Q", self.ring_degree, self.scale_bits,
                           len(self.moduli), *self.moduli)

    @classmethod
    def from_bytes(cls, raw: bytes) -> CkksParams:
        if len(raw) < 12:
            raise ParameterError("truncated parameter block")
        n, scale_bits, count = struct.unpack_from("<III", raw)
        if len(raw) != 12 + 8 * count:
            raise ParameterError("parameter block length mismatch")
        moduli = struct.unpack_from(f"<{count}Q", raw, 12)
        return cls(n, tuple(moduli), scale_bits)

    @cached_property
    def fingerprint(self) -> bytes:
        return hashlib.sha256(b"CKKS-PARAMS" + self.to_bytes()).digest()

    def __eq__(self, other):
        return isinstance(other, CkksParams) and self.fingerprint == other.fingerprint

    def __hash__(self):
        return hash(self.fingerprint)

