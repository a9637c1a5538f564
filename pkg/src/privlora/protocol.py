"""Session framing and message payloads for the split-inference exchange.

Frame layout (little-endian)::

    magic "PLLI" | version u16 | type u8 | payload length u32 | payload

A LoRA round trip after setup is exactly one LORA_REQ and one LORA_RESP
unless the ciphertexts exceed the frame cap, in which case both directions
are split into numbered chunks.
"""

from __future__ import annotations

import enum
import os
import socket
import struct
from dataclasses import dataclass

from .linalg import PackLayout

MAGIC = b"PLLI"
VERSION = 1
HEADER = struct.Struct("<4sHBI")
DEFAULT_MAX_FRAME = 64 * 1024 * 1024
MAX_FRAME_ENV = "PRIVLORA_MAX_FRAME"


def max_frame_size() -> int:
    raw = os.environ.get(MAX_FRAME_ENV)
    return int(raw) if raw else DEFAULT_MAX_FRAME


class MsgType(enum.IntEnum):
    HELLO = 1
    PARAMS = 2
    PUBKEY = 3
    ROTKEYS = 4
    MODEL = 5
    LORA_REQ = 6
    LORA_RESP = 7
    ERROR = 8
    BYE = 9


class ErrorCode(enum.IntEnum):
    ORDER = 1
    MALFORMED = 2
    KEY_MISMATCH = 3
    LEVEL = 4
    UNKNOWN_ADAPTER = 5
    REPLAY = 6
    PARAMS_REJECTED = 7
    VERSION = 8
    INTERNAL = 9


class ProtocolError(Exception):
    def __init__(self, message: str, code: ErrorCode = ErrorCode.MALFORMED):
        super().__init__(message)
        self.code = code


class FramingError(ProtocolError):
    pass


class RemoteError(ProtocolError):
    """The peer answered with an ERROR frame."""


@dataclass(frozen=True)
class Frame:
    type: MsgType
    payload: bytes = b""
    version: int = VERSION


def encode_frame(frame: Frame, cap: int | None = None) -> bytes:
    cap = max_frame_size() if cap is None else cap
    if len(frame.payload) > cap:
        raise FramingError(f"payload of {len(frame.payload)} bytes exceeds the {cap}-byte cap")
    return HEADER.pack(MAGIC, frame.version, int(frame.type), len(frame.payload)) + frame.payload


def parse_header(head: bytes, cap: int | None = None) -> tuple[int, MsgType, int]:
    cap = max_frame_size() if cap is None else cap
    if len(head) < HEADER.size:
        raise FramingError("truncated frame header")
    magic, version, mtype, length = HEADER.unpack_from(head)
    if magic != MAGIC:
        raise FramingError(f"bad frame magic {magic!r}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise FramingError(f"unknown message type {mtype}") from None
    if length > cap:
        raise FramingError(f"frame of {length} bytes exceeds the {cap}-byte cap")
    return version, mtype, length


def decode_frame(buf: bytes, cap: int | None = None) -> tuple[Frame, int]:
    """Decode one frame from the front of `buf`; returns it and the bytes consumed."""
    version, mtype, length = parse_header(buf, cap)
    end = HEADER.size + length
    if len(buf) < end:
        raise FramingError(f"truncated payload: {len(buf) - HEADER.size} of {length} bytes")
    return Frame(mtype, bytes(buf[HEADER.size:end]), version), end


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionError(f"peer closed the connection after {got} of {n} bytes")
        got += k
    return bytes(buf)


def read_frame(sock: socket.socket, cap: int | None = None) -> Frame:
    version, mtype, length = parse_header(_recv_exact(sock, HEADER.size), cap)
    return Frame(mtype, _recv_exact(sock, length) if length else b"", version)


def write_frame(sock: socket.socket, frame: Frame, cap: int | None = None) -> None:
    sock.sendall(encode_frame(frame, cap))


# ---------------------------------------------------------------- payload helpers

class Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.off = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.off + n > len(self.raw):
            raise ProtocolError("payload is truncated")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        st = struct.Struct(fmt)
        return st.unpack(self.take(st.size))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)

    def end(self) -> None:
        if self.off != len(self.raw):
            raise ProtocolError(f"{len(self.raw) - self.off} unexpected trailing payload bytes")


def blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


@dataclass(frozen=True)
class Hello:
    key_fingerprint: bytes = bytes(32)
    ring_degree: int = 0

    def encode(self) -> bytes:
        return struct.pack("<32sI", self.key_fingerprint, self.ring_degree)

    @classmethod
    def decode(cls, raw: bytes) -> Hello:
        r = Reader(raw)
        fp, n = r.unpack("<32sI")
        r.end()
        return cls(fp, n)


@dataclass(frozen=True)
class AdapterInfo:
    """Public description of one server-side adapter: shapes and modulus, never weights."""

    layer: int
    target: int
    m: int
    n: int
    rank: int
    q: float            # 0 for an adapter without a private linear layer

    FMT = "<IBIIId"


@dataclass(frozen=True)
class ParamsMsg:
    session_id: bytes
    keys_cached: bool
    params_blob: bytes
    adapters: tuple[AdapterInfo, ...]

    def encode(self) -> bytes:
        parts = [struct.pack("<16sB", self.session_id, self.keys_cached), blob(self.params_blob),
                 struct.pack("<I", len(self.adapters))]
        parts += [struct.pack(AdapterInfo.FMT, a.layer, a.target, a.m, a.n, a.rank, a.q) for a in self.adapters]
        return b"".join(parts)

    @classmethod
    def decode(cls, raw: bytes) -> ParamsMsg:
        r = Reader(raw)
        sid, cached = r.unpack("<16sB")
        params_blob = r.blob()
        (count,) = r.unpack("<I")
        adapters = tuple(AdapterInfo(*r.unpack(AdapterInfo.FMT)) for _ in range(count))
        r.end()
        return cls(sid, bool(cached), params_blob, adapters)


@dataclass(frozen=True)
class LoraMsg:
    """Body shared by LORA_REQ and LORA_RESP."""

    t: int
    adapter_id: int
    chunk_index: int
    chunk_count: int
    layout: bytes            # PackLayout.to_bytes()
    first_ct: int            # index of the first ciphertext carried by this chunk
    cts: tuple[bytes, ...]

    HEAD = "<QIIII"

    def encode(self) -> bytes:
        parts = [struct.pack(self.HEAD, self.t, self.adapter_id, self.chunk_index, self.chunk_count, self.first_ct),
                 self.layout, struct.pack("<I", len(self.cts))]
        parts += [blob(c) for c in self.cts]
        return b"".join(parts)

    @classmethod
    def decode(cls, raw: bytes) -> LoraMsg:
        r = Reader(raw)
        t, aid, idx, count, first = r.unpack(cls.HEAD)
        layout = r.take(24)
        (n,) = r.unpack("<I")
        cts = tuple(r.blob() for _ in range(n))
        r.end()
        if count < 1 or idx >= count:
            raise ProtocolError(f"bad chunk numbering {idx}/{count}")
        return cls(t, aid, idx, count, layout, first, cts)

    def parsed_layout(self, slot_count: int) -> PackLayout:
        try:
            return PackLayout.from_bytes(self.layout, slot_count)
        except ValueError as exc:
            raise ProtocolError(f"bad layout block: {exc}") from None


def chunk_ciphertexts(cts: list[bytes], cap: int, overhead: int = 256) -> list[tuple[int, list[bytes]]]:
    """Group serialized ciphertexts into (first index, list) chunks that each fit under `cap`."""
    chunks, cur, size, first = [], [], overhead, 0
    for i, c in enumerate(cts):
        need = len(c) + 4
        if need + overhead > cap:
            raise FramingError(f"a single ciphertext of {len(c)} bytes exceeds the frame cap")
        if cur and size + need > cap:
            chunks.append((first, cur))
            cur, size, first = [], overhead, i
        cur.append(c)
        size += need
    chunks.append((first, cur))
    return chunks


def error_payload(code: ErrorCode, message: str) -> bytes:
    return struct.pack("<H", int(code)) + message.encode("utf-8")[:4096]


def parse_error(raw: bytes) -> RemoteError:
    if len(raw) < 2:
        return RemoteError("malformed ERROR frame")
    (code,) = struct.unpack_from("<H", raw)
    try:
        code = ErrorCode(code)
    except ValueError:
        code = ErrorCode.INTERNAL
    return RemoteError(raw[2:].decode("utf-8", "replace"), code)
