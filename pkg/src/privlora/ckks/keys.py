from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .encoding import automorphism_map, galois_element
from .params import CkksParams, KeyMismatchError, ParameterError
from .ring import signed_to_residues

ERROR_STDDEV = 3.2


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_ternary(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(-1, 2, size=n, dtype=np.int64)


def sample_error(rng: np.random.Generator, shape) -> np.ndarray:
    return np.rint(rng.normal(0.0, ERROR_STDDEV, size=shape)).astype(np.int64)


def sample_uniform(rng: np.random.Generator, params: CkksParams, limbs, lead=()) -> np.ndarray:
    q = np.array([params.moduli[i] for i in limbs], dtype=np.int64)[:, None]
    return rng.integers(0, q, size=(*lead, len(limbs), params.ring_degree), dtype=np.int64)


def apply_automorphism(coeffs: np.ndarray, g: int, q_col: np.ndarray) -> np.ndarray:
    """Apply X -> X**g to residue rows (..., L, N) in the coefficient domain."""
    n = coeffs.shape[-1]
    dest, negate = automorphism_map(g, n)
    src = np.where(negate, np.where(coeffs == 0, 0, q_col - coeffs), coeffs)
    out = np.empty_like(coeffs)
    out[..., dest] = src
    return out


def normalize_step(step: int, params: CkksParams) -> int:
    return step % params.slot_count


@dataclass(frozen=True, eq=False)
class SecretKey:
    params: CkksParams
    coeffs: np.ndarray      # signed ternary, shape (N,)
    ntt_data: np.ndarray    # over every prime incl. the special one, shape (L+2, N)


@dataclass(frozen=True, eq=False)
class PublicKey:
    """RLWE pair (b, a) = (-a*s + e, a) in the NTT domain over the data primes."""

    params: CkksParams
    data: np.ndarray        # (2, L+1, N)


@dataclass(frozen=True, eq=False)
class RotationKeys:
    """Key-switching keys s(X**g) -> s(X), one per requested rotation step.

    Each entry has shape (L+1 digits, 2, L+2 limbs, N), NTT domain; digit i
    carries P*s(X**g) in limb i only.
    """

    params: CkksParams
    steps: tuple[int, ...]
    keys: dict[int, np.ndarray]

    def for_step(self, step: int) -> np.ndarray:
        norm = normalize_step(step, self.params)
        try:
            return self.keys[norm]
        except KeyError:
            raise KeyMismatchError(f"no rotation key for step {step}") from None

    def has_step(self, step: int) -> bool:
        return normalize_step(step, self.params) == 0 or normalize_step(step, self.params) in self.keys


@dataclass(frozen=True, eq=False)
class PublicKeySet:
    """Everything a server may hold: encryption and rotation keys, never the secret."""

    public: PublicKey
    rotations: RotationKeys

    @property
    def params(self) -> CkksParams:
        return self.public.params

    @cached_property
    def fingerprint(self) -> bytes:
        from .serialize import dump_public_key, dump_rotation_keys

        h = hashlib.sha256()
        h.update(dump_public_key(self.public))
        h.update(dump_rotation_keys(self.rotations))
        return h.digest()


@dataclass(frozen=True, eq=False)
class KeyMaterial:
    secret: SecretKey
    public: PublicKey
    rotations: RotationKeys

    @property
    def params(self) -> CkksParams:
        return self.public.params

    @cached_property
    def public_set(self) -> PublicKeySet:
        return PublicKeySet(self.public, self.rotations)

    @property
    def fingerprint(self) -> bytes:
        return self.public_set.fingerprint


def _make_rotation_key(params: CkksParams, sk: SecretKey, step: int, rng) -> np.ndarray:
    big_l = params.max_level
    limbs = params.key_limbs(big_l)
    tables = params.tables
    q_col = np.array([params.moduli[i] for i in limbs], dtype=np.int64)[:, None]
    g = galois_element(step, params.ring_degree)
    s_g = apply_automorphism(signed_to_residues(sk.coeffs, params, limbs), g, q_col)
    s_g_ntt = tables.forward(s_g, limbs)
    special = params.moduli[-1]
    a = sample_uniform(rng, params, limbs, lead=(big_l + 1,))
    e = tables.forward(signed_to_residues(sample_error(rng, (big_l + 1, params.ring_degree)), params, limbs), limbs)
    b = np.mod(e - tables.mul(a, sk.ntt_data[None], limbs), q_col)
    for i in range(big_l + 1):
        p_mod = np.full((1, params.ring_degree), special % params.moduli[i], dtype=np.int64)
        gadget = tables.mul(s_g_ntt[i:i + 1], p_mod, [i])[0]
        b[i, i] = (b[i, i] + gadget) % params.moduli[i]
    return np.stack((b, a), axis=1)


def keygen(params: CkksParams, rotation_steps, rng=None) -> KeyMaterial:
    """Generate secret, public and rotation keys for exactly `rotation_steps`.

    `rng` is a numpy Generator or a seed; equal seeds give identical keys.
    """
    steps = tuple(int(s) for s in rotation_steps)
    if not steps:
        raise ParameterError("rotation step set must be nonempty")
    rng = as_generator(rng)
    n = params.ring_degree
    tables = params.tables
    all_limbs = params.key_limbs(params.max_level)
    s = sample_ternary(rng, n)
    s_ntt = tables.forward(signed_to_residues(s, params, all_limbs), all_limbs)
    sk = SecretKey(params, s, s_ntt)

    data_limbs = params.data_limbs(params.max_level)
    q_col = np.array([params.moduli[i] for i in data_limbs], dtype=np.int64)[:, None]
    a = sample_uniform(rng, params, data_limbs)
    e = tables.forward(signed_to_residues(sample_error(rng, n), params, data_limbs), data_limbs)
    b = np.mod(e - tables.mul(a, s_ntt[: len(data_limbs)], data_limbs), q_col)
    pk = PublicKey(params, np.stack((b, a)))

    keys: dict[int, np.ndarray] = {}
    for step in steps:
        norm = normalize_step(step, params)
        if norm == 0 or norm in keys:
            continue
        keys[norm] = _make_rotation_key(params, sk, norm, rng)
    return KeyMaterial(sk, pk, RotationKeys(params, steps, keys))
