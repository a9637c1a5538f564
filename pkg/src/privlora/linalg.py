"""Encrypted low-rank matrix product x @ A1 @ A2 + Q over packed CKKS slots.

Each input row is replicated r times before encryption; replica (i, rho)
owns the m_pad slots starting at ((i*r) + rho) * m_pad. The server then runs

1. multiply by column rho of A1, rescale, shift-and-sum over m_pad slots;
2. mask everything but the block heads, rescale, replicate each head over
   its block with negative rotations;
3. multiply by row rho of A2, rescale, sum the r replicas of each row;
4. add the per-round offset, with uniform noise in every non-result slot.

Result (i, j) ends up in slot (i*r)*m_pad + j at level L-3.
"""

from __future__ import annotations

import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import ckks
from .ckks import Ciphertext, CkksParams, Plaintext

STAGES = 3


class LayoutError(ValueError):
    pass


def next_pow2(x: int) -> int:
    return 1 if x <= 1 else 1 << (int(x) - 1).bit_length()


@dataclass(frozen=True)
class PackLayout:
    d: int
    m_pad: int
    r: int
    n: int
    slot_count: int

    def __post_init__(self):
        for name in ("m_pad", "r"):
            v = getattr(self, name)
            if v < 1 or v & (v - 1):
                raise LayoutError(f"{name}={v} is not a power of two")
        if self.d < 0:
            raise LayoutError("negative row count")
        if not 1 <= self.n <= self.m_pad:
            raise LayoutError(f"output width n={self.n} must be in [1, m_pad={self.m_pad}]")
        if self.r * self.m_pad > self.slot_count:
            raise LayoutError(f"r*m_pad={self.r * self.m_pad} overflows {self.slot_count} slots")

    @classmethod
    def for_dims(cls, d: int, m: int, r: int, n: int, slot_count: int) -> PackLayout:
        return cls(d, next_pow2(m), next_pow2(r), n, slot_count)

    @property
    def block(self) -> int:
        return self.r * self.m_pad

    @property
    def rows_per_ct(self) -> int:
        return self.slot_count // self.block

    @property
    def ct_count(self) -> int:
        return -(-self.d // self.rows_per_ct)

    @property
    def log_m(self) -> int:
        return self.m_pad.bit_length() - 1

    @property
    def log_r(self) -> int:
        return self.r.bit_length() - 1

    @property
    def rotations_per_ct(self) -> int:
        return 2 * self.log_m + self.log_r

    def with_rows(self, d: int) -> PackLayout:
        return PackLayout(d, self.m_pad, self.r, self.n, self.slot_count)

    def rotation_steps(self) -> list[int]:
        steps = [1 << j for j in range(self.log_m)]
        steps += [-(1 << j) for j in range(self.log_m)]
        steps += [self.m_pad << j for j in range(self.log_r)]
        return steps

    def result_slots(self) -> np.ndarray:
        """Slot index of result (i_local, j) within one ciphertext, shape (rows_per_ct, n)."""
        rows = np.arange(self.rows_per_ct)[:, None] * self.block
        return rows + np.arange(self.n)[None, :]

    def rows_of(self, ct_index: int) -> range:
        start = ct_index * self.rows_per_ct
        return range(start, min(start + self.rows_per_ct, self.d))

    def to_bytes(self) -> bytes:
        return struct.pack("<6I", self.d, self.m_pad, self.r, self.n, self.rows_per_ct, self.ct_count)

    @classmethod
    def from_bytes(cls, raw: bytes, slot_count: int) -> PackLayout:
        if len(raw) != 24:
            raise LayoutError("layout block must be 24 bytes")
        d, m_pad, r, n, rows_per_ct, ct_count = struct.unpack("<6I", raw)
        layout = cls(d, m_pad, r, n, slot_count)
        if (layout.rows_per_ct, layout.ct_count) != (rows_per_ct, ct_count):
            raise LayoutError("layout block is internally inconsistent")
        return layout


@dataclass(frozen=True, eq=False)
class PackedMatrix:
    layout: PackLayout
    ciphertexts: tuple[Ciphertext, ...]

    def __post_init__(self):
        if len(self.ciphertexts) != self.layout.ct_count:
            raise LayoutError(f"{len(self.ciphertexts)} ciphertexts for a layout of {self.layout.ct_count}")
        if len({(c.level, round(c.scale)) for c in self.ciphertexts}) > 1:
            raise LayoutError("packed ciphertexts disagree on level or scale")

    @property
    def level(self) -> int:
        return self.ciphertexts[0].level if self.ciphertexts else -1

    @property
    def scale(self) -> float:
        return self.ciphertexts[0].scale if self.ciphertexts else 0.0


@dataclass(frozen=True, eq=False)
class Multipliers:
    """The round-independent plaintexts: A1 columns, head mask and A2 rows."""

    a1: Plaintext
    mask: Plaintext
    a2: Plaintext


@dataclass(frozen=True, eq=False)
class ServerOperands:
    a1: Plaintext
    mask: Plaintext
    a2: Plaintext
    offsets: tuple[Plaintext, ...]
    offset_slots: tuple[np.ndarray, ...]


def packed_slots(x: np.ndarray, layout: PackLayout, ct_index: int) -> np.ndarray:
    rows = layout.rows_of(ct_index)
    block = np.zeros((layout.rows_per_ct, layout.r, layout.m_pad))
    block[: len(rows), :, : x.shape[1]] = x[rows.start:rows.stop, None, :]
    return block.ravel()


def pack_input(x, layout: PackLayout, keys, rng=None) -> PackedMatrix:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != layout.d or x.shape[1] > layout.m_pad:
        raise LayoutError(f"input of shape {x.shape} does not fit layout d={layout.d}, m_pad={layout.m_pad}")
    params = keys.params
    if layout.slot_count != params.slot_count:
        raise LayoutError("layout slot count does not match the parameters")
    rng = ckks.keys.as_generator(rng)
    cts = tuple(ckks.encrypt(ckks.encode(packed_slots(x, layout, c), params), keys, rng)
                for c in range(layout.ct_count))
    return PackedMatrix(layout, cts)


def build_multipliers(a1, a2, layout: PackLayout, params: CkksParams) -> Multipliers:
    """Encode A1, the head mask and A2, each at the prime it will be rescaled by.

    That choice leaves the ciphertext scale unchanged by every stage.
    """
    a1 = np.asarray(a1, dtype=np.float64)
    a2 = np.asarray(a2, dtype=np.float64)
    m, r = a1.shape
    if a2.shape[0] != r or m > layout.m_pad or r > layout.r or a2.shape[1] != layout.n:
        raise LayoutError(f"A1 {a1.shape} / A2 {a2.shape} do not match the layout")
    if layout.slot_count != params.slot_count:
        raise LayoutError("layout slot count does not match the parameters")
    top = params.max_level
    if top < STAGES:
        raise ckks.LevelError("parameters do not support three rescales")
    a1_rows = np.zeros((layout.r, layout.m_pad))
    a1_rows[:r, :m] = a1.T
    a2_rows = np.zeros((layout.r, layout.m_pad))
    a2_rows[:r, : layout.n] = a2
    heads = np.zeros((layout.r, layout.m_pad))
    heads[:, 0] = 1.0

    def tiled(rows):
        return np.tile(rows.ravel(), layout.rows_per_ct)

    return Multipliers(ckks.encode(tiled(a1_rows), params, top, params.moduli[top]),
                       ckks.encode(tiled(heads), params, top - 1, params.moduli[top - 1]),
                       ckks.encode(tiled(a2_rows), params, top - 2, params.moduli[top - 2]))


def offset_slot_vectors(qt, layout: PackLayout, junk_rng=None, junk_bound: float = 0.0) -> list[np.ndarray]:
    """One slot vector per ciphertext: Qt in the result slots, U(-bound, bound) everywhere else."""
    qt = np.asarray(qt, dtype=np.float64)
    if qt.shape != (layout.d, layout.n):
        raise LayoutError(f"offset matrix {qt.shape} does not match ({layout.d}, {layout.n})")
    rng = ckks.keys.as_generator(junk_rng)
    size = layout.rows_per_ct * layout.block
    result_slots = layout.result_slots()
    out = []
    for c in range(layout.ct_count):
        rows = layout.rows_of(c)
        vec = rng.uniform(-junk_bound, junk_bound, size) if junk_bound > 0 else np.zeros(size)
        vec[result_slots[: len(rows)].ravel()] = qt[rows.start:rows.stop].ravel()
        out.append(vec)
    return out


def build_server_operands(a1, a2, qt, layout: PackLayout, params: CkksParams, junk_rng=None,
                          junk_bound: float = 0.0, scale: float | None = None,
                          multipliers: Multipliers | None = None) -> ServerOperands:
    """Multiplier plaintexts plus one offset plaintext per ciphertext.

    `junk_bound` is the half-width of the uniform noise written into the
    non-result slots; `multipliers` reuses a previously encoded A1/mask/A2.
    """
    mult = multipliers or build_multipliers(a1, a2, layout, params)
    scale = params.scale if scale is None else scale
    vectors = offset_slot_vectors(qt, layout, junk_rng, junk_bound)
    offsets = tuple(ckks.encode(v, params, params.max_level - STAGES, scale) for v in vectors)
    return ServerOperands(mult.a1, mult.mask, mult.a2, offsets, tuple(vectors))


def _apply_one(ct: Ciphertext, offset: Plaintext, ops: ServerOperands, layout: PackLayout, keys,
               counter: Counter | None) -> Ciphertext:
    def rot_sum(c, steps):
        for s in steps:
            c = ckks.add(c, ckks.rotate(c, s, keys))
            if counter is not None:
                counter["rotate"] += 1
        return c

    def mult(c, pt):
        if counter is not None:
            counter["cmult"] += 1
            counter["rescale"] += 1
        return ckks.rescale(ckks.cmult_plain(c, pt))

    ct = mult(ct, ops.a1)
    ct = rot_sum(ct, [1 << j for j in range(layout.log_m)])
    ct = mult(ct, ops.mask)
    ct = rot_sum(ct, [-(1 << j) for j in range(layout.log_m)])
    ct = mult(ct, ops.a2)
    ct = rot_sum(ct, [layout.m_pad << j for j in range(layout.log_r)])
    return ckks.add_plain(ct, offset)


def he_lora_apply(packed: PackedMatrix, ops: ServerOperands, keys, counter: Counter | None = None,
                  workers: int = 1) -> PackedMatrix:
    """Server-side kernel. Consumes exactly three levels per ciphertext.

    `counter`, when given, accumulates the number of rotations, plaintext
    multiplications and rescales issued. `workers > 1` processes ciphertext
    chunks on a thread pool.
    """
    layout = packed.layout
    if len(ops.offsets) != layout.ct_count:
        raise LayoutError("operand set was built for a different row count")
    for ct in packed.ciphertexts:
        if ct.level != ct.params.max_level:
            raise ckks.LevelError(f"input ciphertext at level {ct.level}, expected full level {ct.params.max_level}")
    missing = [s for s in layout.rotation_steps() if not keys.rotations.has_step(s)]
    if missing:
        raise ckks.KeyMismatchError(f"missing rotation keys for steps {missing}")

    jobs = list(zip(packed.ciphertexts, ops.offsets))
    if workers > 1 and len(jobs) > 1:
        counters = [Counter() for _ in jobs]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(lambda a: _apply_one(a[0][0], a[0][1], ops, layout, keys, a[1]),
                                zip(jobs, counters)))
        if counter is not None:
            for c in counters:
                counter.update(c)
    else:
        out = [_apply_one(ct, off, ops, layout, keys, counter) for ct, off in jobs]
    return PackedMatrix(layout, tuple(out))


def decrypt_slots(packed: PackedMatrix, keys) -> list[np.ndarray]:
    return [ckks.decode(ckks.decrypt(ct, keys)) for ct in packed.ciphertexts]


def extract_result(packed: PackedMatrix, keys) -> np.ndarray:
    """Decrypt and read result slot ((i*r)*m_pad + j) for every row i and column j < n."""
    layout = packed.layout
    out = np.empty((layout.d, layout.n))
    slots = layout.result_slots()
    for c, vec in enumerate(decrypt_slots(packed, keys)):
        rows = layout.rows_of(c)
        out[rows.start:rows.stop] = vec[slots[: len(rows)]]
    return out
