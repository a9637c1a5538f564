"""Binary wire format for parameters, keys, plaintexts and ciphertexts.

Every object starts with the same little-endian header::

    magic "CKL1" | tag u8 | params fingerprint (32 bytes) | level u32 | log2(scale) f64

followed by a tag-specific body. Ring elements are written as per-limb u64
arrays. Keys travel in the NTT domain, plaintexts and ciphertexts in the
coefficient domain.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .keys import PublicKey, PublicKeySet, RotationKeys, SecretKey
from .params import CkksError, CkksParams, KeyMismatchError
from .ring import Ciphertext, Plaintext, moduli_column

MAGIC = b"CKL1"
HEADER = struct.Struct("<4sB32sId")

TAG_PARAMS = 1
TAG_PLAINTEXT = 2
TAG_CIPHERTEXT = 3
TAG_PUBLIC_KEY = 4
TAG_SECRET_KEY = 5
TAG_ROTATION_KEYS = 6


class SerializationError(CkksError):
    pass


def _header(tag: int, params: CkksParams, level: int = 0, scale: float = 1.0) -> bytes:
    return HEADER.pack(MAGIC, tag, params.fingerprint, level, math.log2(scale))


def _parse_header(raw: bytes, tag: int, params: CkksParams | None):
    if len(raw) < HEADER.size:
        raise SerializationError("truncated header")
    magic, got_tag, fp, level, scale_exp = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise SerializationError(f"bad magic {magic!r}")
    if got_tag != tag:
        raise SerializationError(f"expected object tag {tag}, got {got_tag}")
    if params is not None and fp != params.fingerprint:
        raise KeyMismatchError("parameter fingerprint mismatch")
    return fp, level, scale_exp, memoryview(raw)[HEADER.size:]


def _array(body, shape) -> np.ndarray:
    count = int(np.prod(shape))
    if len(body) != 8 * count:
        raise SerializationError(f"body holds {len(body)} bytes, expected {8 * count}")
    return np.frombuffer(body, dtype="<u8").astype(np.int64).reshape(shape)


def _check_residues(arr: np.ndarray, params: CkksParams, limbs) -> None:
    q = moduli_column(params, limbs)
    if (arr < 0).any() or (arr >= q).any():
        raise SerializationError("residue out of range for its prime")


def dump_params(params: CkksParams) -> bytes:
    return _header(TAG_PARAMS, params) + params.to_bytes()


def load_params(raw: bytes) -> CkksParams:
    fp, _, _, body = _parse_header(raw, TAG_PARAMS, None)
    params = CkksParams.from_bytes(bytes(body))
    if params.fingerprint != fp:
        raise KeyMismatchError("parameter block does not match its fingerprint")
    return params


def dump_plaintext(pt: Plaintext) -> bytes:
    return _header(TAG_PLAINTEXT, pt.params, pt.level, pt.scale) + pt.data.astype("<u8").tobytes()


def load_plaintext(raw: bytes, params: CkksParams) -> Plaintext:
    _, level, scale_exp, body = _parse_header(raw, TAG_PLAINTEXT, params)
    if level > params.max_level:
        raise SerializationError(f"level {level} above maximum {params.max_level}")
    data = _array(body, (level + 1, params.ring_degree))
    _check_residues(data, params, params.data_limbs(level))
    return Plaintext(data, level, 2.0 ** scale_exp, params)


def dump_ciphertext(ct: Ciphertext) -> bytes:
    return _header(TAG_CIPHERTEXT, ct.params, ct.level, ct.scale) + ct.data.astype("<u8").tobytes()


def load_ciphertext(raw: bytes, params: CkksParams) -> Ciphertext:
    _, level, scale_exp, body = _parse_header(raw, TAG_CIPHERTEXT, params)
    if level > params.max_level:
        raise SerializationError(f"level {level} above maximum {params.max_level}")
    if not math.isfinite(scale_exp):
        raise SerializationError("non-finite scale")
    data = _array(body, (2, level + 1, params.ring_degree))
    _check_residues(data, params, params.data_limbs(level))
    return Ciphertext(data, level, 2.0 ** scale_exp, params)


def dump_public_key(pk: PublicKey) -> bytes:
    p = pk.params
    return _header(TAG_PUBLIC_KEY, p, p.max_level) + pk.data.astype("<u8").tobytes()


def load_public_key(raw: bytes, params: CkksParams) -> PublicKey:
    _, _, _, body = _parse_header(raw, TAG_PUBLIC_KEY, params)
    data = _array(body, (2, params.max_level + 1, params.ring_degree))
    _check_residues(data, params, params.data_limbs(params.max_level))
    return PublicKey(params, data)


def dump_secret_key(sk: SecretKey) -> bytes:
    p = sk.params
    return _header(TAG_SECRET_KEY, p, p.max_level) + sk.ntt_data.astype("<u8").tobytes()


def load_secret_key(raw: bytes, params: CkksParams) -> SecretKey:
    _, _, _, body = _parse_header(raw, TAG_SECRET_KEY, params)
    limbs = params.key_limbs(params.max_level)
    data = _array(body, (len(limbs), params.ring_degree))
    _check_residues(data, params, limbs)
    coeff = params.tables.inverse(data[:1], [0])[0]
    signed = np.where(coeff > params.moduli[0] // 2, coeff - params.moduli[0], coeff)
    return SecretKey(params, signed, data)


def dump_rotation_keys(rk: RotationKeys) -> bytes:
    p = rk.params
    parts = [_header(TAG_ROTATION_KEYS, p, p.max_level),
             struct.pack(f"<I{len(rk.steps)}i", len(rk.steps), *rk.steps),
             struct.pack("<I", len(rk.keys))]
    for step in sorted(rk.keys):
        parts.append(struct.pack("<I", step))
        parts.append(rk.keys[step].astype("<u8").tobytes())
    return b"".join(parts)


def load_rotation_keys(raw: bytes, params: CkksParams) -> RotationKeys:
    _, _, _, body = _parse_header(raw, TAG_ROTATION_KEYS, params)
    body = bytes(body)
    try:
        (n_steps,) = struct.unpack_from("<I", body)
        steps = struct.unpack_from(f"<{n_steps}i", body, 4)
        off = 4 + 4 * n_steps
        (n_keys,) = struct.unpack_from("<I", body, off)
    except struct.error as exc:
        raise SerializationError(f"truncated rotation key block: {exc}") from None
    off += 4
    big_l = params.max_level
    shape = (big_l + 1, 2, big_l + 2, params.ring_degree)
    size = 8 * int(np.prod(shape))
    limbs = params.key_limbs(big_l)
    keys = {}
    for _ in range(n_keys):
        if off + 4 + size > len(body):
            raise SerializationError("truncated rotation key block")
        (step,) = struct.unpack_from("<I", body, off)
        arr = _array(body[off + 4: off + 4 + size], shape)
        _check_residues(arr, params, limbs)
        keys[step] = arr
        off += 4 + size
    if off != len(body):
        raise SerializationError("trailing bytes after rotation keys")
    return RotationKeys(params, tuple(steps), keys)


def dump_public_set(keys: PublicKeySet) -> tuple[bytes, bytes]:
    return dump_public_key(keys.public), dump_rotation_keys(keys.rotations)
