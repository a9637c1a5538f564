"""Encoding, encryption and the leveled homomorphic operations."""

from __future__ import annotations

import math

import numpy as np

from .encoding import coeffs_to_slots, galois_element, slots_to_coeffs
from .keys import (KeyMaterial, PublicKey, PublicKeySet, RotationKeys, SecretKey, apply_automorphism,
                   as_generator, normalize_step, sample_error, sample_ternary)
from .params import AlignmentError, CapacityError, CkksParams, KeyMismatchError, LevelError, ParameterError
from .ring import Ciphertext, Plaintext, centered, crt_to_float, float_to_residues, moduli_column, signed_to_residues

SCALE_RTOL = 1e-9


def encode(values, params: CkksParams, level: int | None = None, scale: float | None = None) -> Plaintext:
    values = np.asarray(values)
    if values.ndim != 1:
        values = values.ravel()
    if len(values) > params.slot_count:
        raise CapacityError(f"{len(values)} values exceed {params.slot_count} slots")
    level = params.max_level if level is None else level
    if not 0 <= level <= params.max_level:
        raise LevelError(f"level {level} outside [0, {params.max_level}]")
    scale = params.scale if scale is None else float(scale)
    if not scale > 0:
        raise ParameterError("scale must be positive")
    coeffs = slots_to_coeffs(values, params.ring_degree) * scale
    data = float_to_residues(coeffs, params, params.data_limbs(level))
    return Plaintext(data, level, scale, params)


def decode(pt: Plaintext, complex_output: bool = False) -> np.ndarray:
    coeffs = crt_to_float(pt.data, pt.params, pt.params.data_limbs(pt.level), pt.scale)
    slots = coeffs_to_slots(coeffs, pt.params.ring_degree)
    return slots if complex_output else slots.real


def _public(keys) -> PublicKey:
    if isinstance(keys, PublicKey):
        return keys
    if isinstance(keys, (KeyMaterial, PublicKeySet)):
        return keys.public
    raise TypeError(f"expected public key material, got {type(keys).__name__}")


def _secret(keys) -> SecretKey:
    if isinstance(keys, SecretKey):
        return keys
    if isinstance(keys, KeyMaterial):
        return keys.secret
    raise TypeError(f"expected secret key material, got {type(keys).__name__}")


def _rotations(keys) -> RotationKeys:
    if isinstance(keys, RotationKeys):
        return keys
    if isinstance(keys, (KeyMaterial, PublicKeySet)):
        return keys.rotations
    raise TypeError(f"expected rotation keys, got {type(keys).__name__}")


def _same_params(a: CkksParams, b: CkksParams) -> None:
    if a.fingerprint != b.fingerprint:
        raise KeyMismatchError("parameter fingerprints differ")


def encrypt(pt: Plaintext, keys, rng=None) -> Ciphertext:
    pk = _public(keys)
    params = pt.params
    _same_params(params, pk.params)
    rng = as_generator(rng)
    tables = params.tables
    limbs = params.data_limbs(pt.level)
    n = params.ring_degree
    v = tables.forward(signed_to_residues(sample_ternary(rng, n), params, limbs), limbs)
    masked = tables.inverse(tables.mul(pk.data[:, : pt.level + 1], v[None], limbs), limbs)
    noise = signed_to_residues(sample_error(rng, (2, n)), params, limbs)
    q = moduli_column(params, limbs)
    out = (masked + noise) % q
    out[0] = (out[0] + pt.data) % q
    return Ciphertext(out, pt.level, pt.scale, params)


def decrypt(ct: Ciphertext, keys) -> Plaintext:
    sk = _secret(keys)
    params = ct.params
    _same_params(params, sk.params)
    tables = params.tables
    limbs = params.data_limbs(ct.level)
    c1s = tables.inverse(tables.mul(tables.forward(ct.data[1], limbs), sk.ntt_data[: ct.level + 1], limbs), limbs)
    m = (ct.data[0] + c1s) % moduli_column(params, limbs)
    return Plaintext(m, ct.level, ct.scale, params)


def _check_aligned(level_a, scale_a, level_b, scale_b) -> None:
    if level_a != level_b:
        raise AlignmentError(f"level mismatch: {level_a} vs {level_b}")
    if not math.isclose(scale_a, scale_b, rel_tol=SCALE_RTOL):
        raise AlignmentError(f"scale mismatch: 2^{math.log2(scale_a):.4f} vs 2^{math.log2(scale_b):.4f}")


def add(ct1: Ciphertext, ct2: Ciphertext) -> Ciphertext:
    _same_params(ct1.params, ct2.params)
    _check_aligned(ct1.level, ct1.scale, ct2.level, ct2.scale)
    q = moduli_column(ct1.params, ct1.params.data_limbs(ct1.level))
    return Ciphertext((ct1.data + ct2.data) % q, ct1.level, ct1.scale, ct1.params)


def sub(ct1: Ciphertext, ct2: Ciphertext) -> Ciphertext:
    _same_params(ct1.params, ct2.params)
    _check_aligned(ct1.level, ct1.scale, ct2.level, ct2.scale)
    q = moduli_column(ct1.params, ct1.params.data_limbs(ct1.level))
    return Ciphertext((ct1.data - ct2.data) % q, ct1.level, ct1.scale, ct1.params)


def add_plain(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    _same_params(ct.params, pt.params)
    _check_aligned(ct.level, ct.scale, pt.level, pt.scale)
    q = moduli_column(ct.params, ct.params.data_limbs(ct.level))
    out = ct.data.copy()
    out[0] = (out[0] + pt.data) % q
    return Ciphertext(out, ct.level, ct.scale, ct.params)


def cmult_plain(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    """Slotwise product with a plaintext; the result carries scale ct.scale * pt.scale."""
    _same_params(ct.params, pt.params)
    if ct.level != pt.level:
        raise AlignmentError(f"plaintext encoded for level {pt.level}, ciphertext at {ct.level}")
    params = ct.params
    tables = params.tables
    limbs = params.data_limbs(ct.level)
    prod = tables.mul(tables.forward(ct.data, limbs), pt.ntt_data[None], limbs)
    return Ciphertext(tables.inverse(prod, limbs), ct.level, ct.scale * pt.scale, params)


def rescale(ct: Ciphertext, p_bits: int | None = None) -> Ciphertext:
    """Drop the top prime q_l: divide by it with rounding and move one level down."""
    if ct.level < 1:
        raise LevelError("cannot rescale a level-0 ciphertext")
    params = ct.params
    q_top = params.moduli[ct.level]
    if p_bits is not None and abs(math.log2(q_top) - p_bits) > 1:
        raise ParameterError(f"rescale by 2^{p_bits} does not match the {q_top.bit_length()}-bit prime at level {ct.level}")
    limbs = params.data_limbs(ct.level - 1)
    q = moduli_column(params, limbs)
    top = centered(ct.data[:, ct.level], q_top)
    diff = (ct.data[:, : ct.level] - top[:, None, :] % q) % q
    inv = np.array([pow(q_top, -1, params.moduli[i]) for i in limbs], dtype=np.int64)[:, None]
    out = params.tables.mul(diff, np.broadcast_to(inv, diff.shape[1:])[None], limbs)
    return Ciphertext(out, ct.level - 1, ct.scale / q_top, params)


def key_switch(params: CkksParams, poly: np.ndarray, level: int, ksk: np.ndarray) -> np.ndarray:
    """Return (d0, d1) with d0 + d1*s ~ poly * s' for the key pair encoded in `ksk`.

    `poly` is a coefficient-domain element over the data primes at `level`.
    """
    tables = params.tables
    data_limbs = params.data_limbs(level)
    ext_limbs = params.key_limbs(level)
    q_ext = moduli_column(params, ext_limbs)
    q_data = moduli_column(params, data_limbs)
    digits = centered(poly, q_data)                                  # (l+1, N), one digit per prime
    lifted = np.mod(digits[:, None, :], q_ext[None])                 # (l+1, l+2, N)
    lifted = tables.forward(lifted, ext_limbs)
    key = ksk[: level + 1][:, :, ext_limbs]                          # (l+1, 2, l+2, N)
    prods = tables.mul(lifted[:, None], key, ext_limbs)
    acc = np.zeros(prods.shape[1:], dtype=np.int64)
    for d in range(level + 1):
        acc = acc + prods[d]
        acc = np.where(acc >= q_ext, acc - q_ext, acc)
    acc = tables.inverse(acc, ext_limbs)
    special = params.moduli[-1]
    tail = centered(acc[:, -1], special)
    body = (acc[:, :-1] - tail[:, None, :] % q_data) % q_data
    p_inv = np.array([pow(special, -1, params.moduli[i]) for i in data_limbs], dtype=np.int64)[:, None]
    return tables.mul(body, np.broadcast_to(p_inv, body.shape[1:])[None], data_limbs)


def rotate(ct: Ciphertext, step: int, keys) -> Ciphertext:
    """Slot i of the result holds slot (i + step) mod slot_count of the input."""
    params = ct.params
    norm = normalize_step(step, params)
    if norm == 0:
        return ct
    rot = _rotations(keys)
    _same_params(params, rot.params)
    ksk = rot.for_step(step)
    limbs = params.data_limbs(ct.level)
    q = moduli_column(params, limbs)
    g = galois_element(norm, params.ring_degree)
    permuted = apply_automorphism(ct.data, g, q)
    switched = key_switch(params, permuted[1], ct.level, ksk)
    out = switched.copy()
    out[0] = (out[0] + permuted[0]) % q
    return Ciphertext(out, ct.level, ct.scale, params)
