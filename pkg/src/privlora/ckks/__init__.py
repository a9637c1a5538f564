"""Leveled RNS-CKKS with plaintext multiplication, rescaling and slot rotation."""

from .keys import KeyMaterial, PublicKey, PublicKeySet, RotationKeys, SecretKey, keygen
from .ops import add, add_plain, cmult_plain, decode, decrypt, encode, encrypt, rescale, rotate, sub
from .params import (PIPELINE_DEPTH, AlignmentError, CapacityError, CkksError, CkksParams, KeyMismatchError,
                     LevelError, ParameterError)
from .ring import Ciphertext, Plaintext, RingElement

__all__ = [
    "AlignmentError", "CapacityError", "Ciphertext", "CkksError", "CkksParams", "KeyMaterial",
    "KeyMismatchError", "LevelError", "PIPELINE_DEPTH", "ParameterError", "Plaintext", "PublicKey",
    "PublicKeySet", "RingElement", "RotationKeys", "SecretKey", "add", "add_plain", "cmult_plain",
    "decode", "decrypt", "encode", "encrypt", "keygen", "rescale", "rotate", "sub",
]
