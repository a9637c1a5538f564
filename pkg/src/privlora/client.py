"""Client half of the split exchange: owns the secret key and runs the public model locally."""

from __future__ import annotations

import socket
from dataclasses import dataclass

import numpy as np
import torch

from . import ckks
from .ckks import serialize as ser
from .linalg import PackedMatrix, PackLayout, extract_result, pack_input
from .pll import demodulate
from .protocol import (AdapterInfo, ErrorCode, Frame, Hello, LoraMsg, MsgType, ParamsMsg, ProtocolError,
                       chunk_ciphertexts, max_frame_size, parse_error, read_frame, write_frame)
from .server import required_rotation_steps
from .toymodel import TARGETS, SplitPoint, ToyModel, load_model


def keys_cover(keys: ckks.KeyMaterial | None, params: ckks.CkksParams, steps) -> bool:
    return keys is not None and keys.params == params and all(keys.rotations.has_step(s) for s in steps)


class PrivLoraClient:
    """One session with a server. Calls are blocking and must not be shared across threads.

    `keys` may be supplied to reuse previously generated (and possibly
    server-cached) key material; otherwise fresh keys are generated once the
    server has announced its parameters. With `use_key_cache=False` the
    fingerprint is withheld, so the keys are always uploaded.
    """

    def __init__(self, address, keys: ckks.KeyMaterial | None = None, ring_degree: int = 0, seed=None,
                 timeout: float | None = 300.0, use_key_cache: bool = True):
        self.rng = np.random.default_rng(seed)
        self.keys = keys
        self.sock = socket.create_connection(tuple(address), timeout=timeout)
        self.frames_sent = 0
        self.frames_received = 0
        self.t = 0
        self.keys_uploaded = False
        try:
            self._handshake(ring_degree, use_key_cache)
        except BaseException:
            self.sock.close()
            raise

    # -- transport
    def _send(self, mtype: MsgType, payload: bytes = b"") -> None:
        write_frame(self.sock, Frame(mtype, payload))
        self.frames_sent += 1

    def _recv(self, *expected: MsgType) -> Frame:
        frame = read_frame(self.sock)
        self.frames_received += 1
        if frame.type == MsgType.ERROR:
            raise parse_error(frame.payload)
        if expected and frame.type not in expected:
            raise ProtocolError(f"expected {'/'.join(e.name for e in expected)}, got {frame.type.name}",
                                ErrorCode.ORDER)
        return frame

    def _handshake(self, ring_degree: int, use_key_cache: bool) -> None:
        fingerprint = self.keys.fingerprint if self.keys is not None and use_key_cache else bytes(32)
        if self.keys is not None and not ring_degree:
            ring_degree = self.keys.params.ring_degree
        self._send(MsgType.HELLO, Hello(fingerprint, ring_degree).encode())
        msg = ParamsMsg.decode(self._recv(MsgType.PARAMS).payload)
        try:
            self.params = ser.load_params(msg.params_blob)
        except ckks.CkksError as exc:
            raise ProtocolError(f"server sent unusable parameters: {exc}", ErrorCode.PARAMS_REJECTED) from None
        self.session_id = msg.session_id
        self.adapters: tuple[AdapterInfo, ...] = msg.adapters
        blob = self._recv(MsgType.MODEL).payload
        self.model: ToyModel | None = load_model(blob) if blob else None
        steps = required_rotation_steps(self.adapters, self.params.slot_count)
        if msg.keys_cached:
            if not keys_cover(self.keys, self.params, steps):
                raise ProtocolError("server reports cached keys that do not match ours", ErrorCode.KEY_MISMATCH)
            return
        if not keys_cover(self.keys, self.params, steps):
            self.keys = ckks.keygen(self.params, steps, self.rng)
        pk_blob, rot_blob = ser.dump_public_set(self.keys.public_set)
        self._send(MsgType.PUBKEY, pk_blob)
        self._send(MsgType.ROTKEYS, rot_blob)
        self.keys_uploaded = True

    def close(self) -> None:
        try:
            self._send(MsgType.BYE)
        except OSError:
            pass
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- LoRA calls
    def adapter_id(self, point: SplitPoint) -> int:
        for i, a in enumerate(self.adapters):
            if (a.layer, a.target) == (point.layer, TARGETS.index(point.target)):
                return i
        raise KeyError(f"server has no adapter at {point}")

    def encrypted_call(self, adapter_id: int, x: np.ndarray) -> PackedMatrix:
        """Pack and encrypt `x`, run one request/response exchange, return the encrypted result."""
        info = self.adapters[adapter_id]
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != info.m:
            raise ValueError(f"activation of shape {x.shape} does not have {info.m} columns")
        layout = PackLayout.for_dims(x.shape[0], info.m, info.rank, info.n, self.params.slot_count)
        packed = pack_input(x, layout, self.keys, self.rng)
        self.t += 1
        t = self.t
        blobs = [ser.dump_ciphertext(c) for c in packed.ciphertexts]
        chunks = chunk_ciphertexts(blobs, max_frame_size())
        raw_layout = layout.to_bytes()
        for i, (first, part) in enumerate(chunks):
            self._send(MsgType.LORA_REQ, LoraMsg(t, adapter_id, i, len(chunks), raw_layout, first, tuple(part)).encode())

        received: list[bytes] = []
        count = None
        while count is None or len(received) < layout.ct_count:
            resp = LoraMsg.decode(self._recv(MsgType.LORA_RESP).payload)
            if resp.t != t:
                raise ProtocolError(f"response for round {resp.t} while waiting for round {t}", ErrorCode.REPLAY)
            if resp.adapter_id != adapter_id or resp.layout != raw_layout:
                raise ProtocolError("response does not match the request's adapter or layout")
            if resp.first_ct != len(received) or (count is not None and resp.chunk_count != count):
                raise ProtocolError("response chunks arrived out of order")
            count = resp.chunk_count
            received.extend(resp.cts)
            if resp.chunk_index + 1 == count:
                break
        if len(received) != layout.ct_count:
            raise ProtocolError(f"{len(received)} response ciphertexts for a layout of {layout.ct_count}")
        try:
            cts = tuple(ser.load_ciphertext(c, self.params) for c in received)
        except ckks.CkksError as exc:
            raise ProtocolError(f"malformed response ciphertext: {exc}") from None
        want = packed.level - 3
        if any(c.level != want for c in cts):
            raise ProtocolError(f"response level {cts[0].level}, expected {want}", ErrorCode.LEVEL)
        return PackedMatrix(layout, cts)

    def lora_call(self, adapter_id: int, x: np.ndarray) -> np.ndarray:
        """Bypass output for rows `x`: decrypted, read from the result slots and demodulated mod q."""
        out = extract_result(self.encrypted_call(adapter_id, x), self.keys)
        q = self.adapters[adapter_id].q
        return demodulate(out, q) if q > 0 else out


@dataclass
class EncryptedBypass:
    """Drop-in bypass for the toy model that routes every adapter call through the server."""

    client: PrivLoraClient

    @torch.no_grad()
    def __call__(self, point: SplitPoint, x: torch.Tensor) -> torch.Tensor:
        rows = x.detach().reshape(-1, x.shape[-1]).numpy()
        y = self.client.lora_call(self.client.adapter_id(point), rows)
        return torch.from_numpy(np.ascontiguousarray(y)).reshape(*x.shape[:-1], -1)
