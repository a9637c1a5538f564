"""Server half of the split exchange: holds the adapters, evaluates them on ciphertexts.

The server keeps only public key material per session. Each LoRA request
gets a fresh (P, k) round from the session RNG, the matching offset Qt is
folded into the encrypted product and the result goes back without ever
being decrypted here.
"""

from __future__ import annotations

import logging
import os
import secrets
import socket
import socketserver
import threading
from collections import Counter, OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import ckks
from .ckks import serialize as ser
from .linalg import LayoutError, PackedMatrix, PackLayout, build_multipliers, build_server_operands, he_lora_apply
from .linalg import next_pow2
from .pll import PllWeights, round_half_even, sample_round
from .protocol import (AdapterInfo, ErrorCode, Frame, FramingError, Hello, LoraMsg, MsgType, ParamsMsg,
                       ProtocolError, VERSION, chunk_ciphertexts, error_payload, max_frame_size, read_frame,
                       write_frame)
from .toymodel import TARGETS, SplitPoint, ToyModel, dump_model

log = logging.getLogger(__name__)

DEFAULT_RING_DEGREE = 8192
MAX_RING_DEGREE = 32768
SEED_ENV = "PRIVLORA_SEED"
KEY_CACHE_SIZE = 16


def junk_bound(q: float) -> float:
    """Half-width of the uniform filler in non-result slots: the spread of kq, or q itself for small q."""
    if q <= 0:
        return 1.0
    return q * max(round_half_even(q), 1)


@dataclass
class ServerAdapter:
    point: SplitPoint
    a1: np.ndarray                 # (m, r), LoRA scaling already folded in
    a2: np.ndarray                 # (r, n)
    pll: PllWeights | None

    @property
    def info(self) -> AdapterInfo:
        m, r = self.a1.shape
        q = self.pll.config.q if self.pll is not None else 0.0
        return AdapterInfo(self.point.layer, TARGETS.index(self.point.target), m, self.a2.shape[1], r, q)

    def layout(self, d: int, slot_count: int) -> PackLayout:
        m, r = self.a1.shape
        return PackLayout.for_dims(d, m, r, self.a2.shape[1], slot_count)


def adapters_from_model(model: ToyModel) -> list[ServerAdapter]:
    out = []
    for point in model.cfg.split_points():
        if point.key not in model.adapters:
            continue
        ad = model.adapter(point)
        a1 = ad.scaling * ad.a1.detach().numpy().copy()
        a2 = ad.a2.detach().numpy().copy()
        out.append(ServerAdapter(point, a1, a2, ad.pll_weights() if ad.pll is not None else None))
    return out


def required_rotation_steps(infos, slot_count: int) -> list[int]:
    steps = set()
    for a in infos:
        steps.update(PackLayout(1, next_pow2(a.m), next_pow2(a.rank), a.n, slot_count).rotation_steps())
    return sorted(steps)


@dataclass
class RoundRecord:
    """Test hook entry: the randomness the server used for one LoRA call."""

    session_id: bytes
    adapter_id: int
    t: int
    round: object      # PllRound, or None for a plain adapter
    offsets: tuple = ()


@dataclass
class Session:
    session_id: bytes
    params: ckks.CkksParams
    rng: np.random.Generator
    keys: ckks.PublicKeySet | None = None
    last_t: int = 0
    frames_in: int = 0
    frames_out: int = 0
    calls: int = 0
    pending: dict = field(default_factory=dict)

    @property
    def ready(self) -> bool:
        return self.keys is not None


class PrivLoraServer:
    """Threaded TCP server; one handler thread per connection, one Session per connection."""

    def __init__(self, model: ToyModel | None = None, host: str = "127.0.0.1", port: int = 0,
                 seed: int | None = None, ring_degree: int = DEFAULT_RING_DEGREE, workers: int = 1,
                 record_rounds: bool = False, timeout: float | None = 120.0,
                 adapters: list[ServerAdapter] | None = None, params: ckks.CkksParams | None = None):
        """Serve the adapters of `model` (and any extra `adapters`).

        Without a model the MODEL message carries an empty payload. `params`
        pins the parameter set offered for its ring degree, which then
        becomes the default.
        """
        if seed is None:
            env = os.environ.get(SEED_ENV)
            seed = int(env) if env else secrets.randbits(63)
        self.seed = seed
        self.default_ring_degree = ring_degree
        self.workers = workers
        self.timeout = timeout
        self.model_blob = dump_model(model, include_adapters=False) if model is not None else b""
        self.adapters = (adapters_from_model(model) if model is not None else []) + list(adapters or [])
        if not self.adapters:
            raise ValueError("server needs at least one adapter")
        self.rounds: list[RoundRecord] | None = [] if record_rounds else None
        self.key_cache: OrderedDict[bytes, ckks.PublicKeySet] = OrderedDict()
        self.key_uploads = 0
        self.sessions_started = 0
        self._lock = threading.Lock()
        self._params: dict[int, ckks.CkksParams] = {}
        if params is not None:
            self._params[params.ring_degree] = params
            self.default_ring_degree = params.ring_degree
        self._multipliers: dict[tuple, object] = {}
        server = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                server.serve_connection(self.request)

        class TCP(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True

        self._tcp = TCP((host, port), Handler)
        self._thread: threading.Thread | None = None

    # -- lifecycle
    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    def start(self) -> PrivLoraServer:
        self._thread = threading.Thread(target=self._tcp.serve_forever, name="privlora-server", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._tcp.serve_forever()

    def close(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    # -- shared state
    def params_for(self, ring_degree: int) -> ckks.CkksParams:
        ring_degree = ring_degree or self.default_ring_degree
        if ring_degree & (ring_degree - 1) or not 4 <= ring_degree <= MAX_RING_DEGREE:
            raise ProtocolError(f"unsupported ring degree {ring_degree}", ErrorCode.PARAMS_REJECTED)
        block = max((a.layout(1, 1 << 30).block for a in self.adapters), default=1)
        if ring_degree // 2 < block:
            raise ProtocolError(f"ring degree {ring_degree} has fewer than {block} slots", ErrorCode.PARAMS_REJECTED)
        with self._lock:
            if ring_degree not in self._params:
                self._params[ring_degree] = ckks.CkksParams.generate(ring_degree)
            return self._params[ring_degree]

    def _cached_keys(self, fingerprint: bytes, params: ckks.CkksParams) -> ckks.PublicKeySet | None:
        with self._lock:
            keys = self.key_cache.get(fingerprint)
            if keys is not None and keys.params == params:
                self.key_cache.move_to_end(fingerprint)
                return keys
        return None

    def _store_keys(self, keys: ckks.PublicKeySet) -> None:
        with self._lock:
            self.key_cache[keys.fingerprint] = keys
            self.key_cache.move_to_end(keys.fingerprint)
            while len(self.key_cache) > KEY_CACHE_SIZE:
                self.key_cache.popitem(last=False)

    def _multipliers_for(self, adapter_id: int, layout: PackLayout, params: ckks.CkksParams):
        key = (adapter_id, layout.with_rows(0), params.fingerprint)
        with self._lock:
            mult = self._multipliers.get(key)
        if mult is None:
            ad = self.adapters[adapter_id]
            mult = build_multipliers(ad.a1, ad.a2, layout, params)
            with self._lock:
                self._multipliers[key] = mult
        return mult

    # -- connection handling
    def _send(self, sock, session: Session | None, mtype: MsgType, payload: bytes = b"") -> None:
        write_frame(sock, Frame(mtype, payload))
        if session is not None:
            session.frames_out += 1

    def _send_error(self, sock, session, code: ErrorCode, message: str) -> None:
        try:
            self._send(sock, session, MsgType.ERROR, error_payload(code, message))
        except OSError:
            pass

    def _read(self, sock, session: Session | None) -> Frame:
        frame = read_frame(sock)
        if session is not None:
            session.frames_in += 1
        return frame

    def serve_connection(self, sock: socket.socket) -> None:
        sock.settimeout(self.timeout)
        session = None
        try:
            session = self._handshake(sock)
            if session is not None:
                self._serve_requests(sock, session)
        except FramingError as exc:
            log.warning("framing error, closing connection: %s", exc)
            self._send_error(sock, session, exc.code, str(exc))
        except ProtocolError as exc:
            log.warning("protocol error, closing connection: %s", exc)
            self._send_error(sock, session, exc.code, str(exc))
        except (ConnectionError, socket.timeout) as exc:
            log.info("connection ended: %s", exc)

    def _handshake(self, sock) -> Session | None:
        frame = self._read(sock, None)
        if frame.type != MsgType.HELLO:
            raise ProtocolError(f"expected HELLO, got {frame.type.name}", ErrorCode.ORDER)
        if frame.version != VERSION:
            raise ProtocolError(f"protocol version {frame.version} is not supported", ErrorCode.VERSION)
        hello = Hello.decode(frame.payload)
        params = self.params_for(hello.ring_degree)
        with self._lock:
            index = self.sessions_started
            self.sessions_started += 1
        session = Session(secrets.token_bytes(16), params, np.random.default_rng([self.seed, index]))
        session.frames_in = 1
        cached = self._cached_keys(hello.key_fingerprint, params)
        msg = ParamsMsg(session.session_id, cached is not None, ser.dump_params(params),
                        tuple(a.info for a in self.adapters))
        self._send(sock, session, MsgType.PARAMS, msg.encode())
        self._send(sock, session, MsgType.MODEL, self.model_blob)
        if cached is not None:
            session.keys = cached
            log.info("session %s: key cache hit", session.session_id.hex()[:8])
            return session

        frame = self._read(sock, session)
        if frame.type == MsgType.BYE:
            return None
        if frame.type != MsgType.PUBKEY:
            raise ProtocolError(f"expected PUBKEY, got {frame.type.name}", ErrorCode.ORDER)
        try:
            public = ser.load_public_key(frame.payload, params)
        except ckks.CkksError as exc:
            raise ProtocolError(f"bad public key: {exc}") from None
        frame = self._read(sock, session)
        if frame.type != MsgType.ROTKEYS:
            raise ProtocolError(f"expected ROTKEYS, got {frame.type.name}", ErrorCode.ORDER)
        try:
            rotations = ser.load_rotation_keys(frame.payload, params)
        except ckks.CkksError as exc:
            raise ProtocolError(f"bad rotation keys: {exc}") from None
        keys = ckks.PublicKeySet(public, rotations)
        missing = [s for s in required_rotation_steps(msg.adapters, params.slot_count)
                   if not rotations.has_step(s)]
        if missing:
            raise ProtocolError(f"rotation keys lack steps {missing}", ErrorCode.KEY_MISMATCH)
        self._store_keys(keys)
        with self._lock:
            self.key_uploads += 1
        session.keys = keys
        return session

    def _serve_requests(self, sock, session: Session) -> None:
        while True:
            frame = self._read(sock, session)
            if frame.type == MsgType.BYE:
                return
            if frame.type != MsgType.LORA_REQ:
                raise ProtocolError(f"unexpected {frame.type.name} after setup", ErrorCode.ORDER)
            try:
                self._handle_request(sock, session, frame)
            except ProtocolError as exc:
                session.pending.clear()
                log.warning("session %s: rejected request: %s", session.session_id.hex()[:8], exc)
                self._send_error(sock, session, exc.code, str(exc))

    def _handle_request(self, sock, session: Session, frame: Frame) -> None:
        params = session.params
        msg = LoraMsg.decode(frame.payload)
        if msg.adapter_id >= len(self.adapters):
            raise ProtocolError(f"unknown adapter {msg.adapter_id}", ErrorCode.UNKNOWN_ADAPTER)
        if msg.chunk_index == 0:
            if msg.t <= session.last_t:
                raise ProtocolError(f"round counter {msg.t} is not above {session.last_t}", ErrorCode.REPLAY)
            session.last_t = msg.t
            session.pending = {"head": msg, "cts": list(msg.cts)}
        else:
            head = session.pending.get("head")
            if head is None or (msg.t, msg.adapter_id, msg.chunk_count, msg.layout) != (
                    head.t, head.adapter_id, head.chunk_count, head.layout):
                raise ProtocolError("chunk does not continue the pending request", ErrorCode.ORDER)
            if msg.chunk_index != session.pending["next"] or msg.first_ct != len(session.pending["cts"]):
                raise ProtocolError("chunks arrived out of order", ErrorCode.ORDER)
            session.pending["cts"].extend(msg.cts)
        session.pending["next"] = msg.chunk_index + 1
        if msg.chunk_index + 1 < msg.chunk_count:
            return
        head, raw_cts = session.pending["head"], session.pending["cts"]
        session.pending = {}
        self._evaluate(sock, session, head, raw_cts)

    def _evaluate(self, sock, session: Session, head: LoraMsg, raw_cts: list[bytes]) -> None:
        params = session.params
        ad = self.adapters[head.adapter_id]
        layout = head.parsed_layout(params.slot_count)
        expected = ad.layout(layout.d, params.slot_count)
        if layout != expected or layout.d == 0:
            raise ProtocolError(f"layout {layout} does not match adapter {head.adapter_id}", ErrorCode.MALFORMED)
        if len(raw_cts) != layout.ct_count:
            raise ProtocolError(f"{len(raw_cts)} ciphertexts for a layout of {layout.ct_count}")
        try:
            cts = tuple(ser.load_ciphertext(c, params) for c in raw_cts)
        except ckks.CkksError as exc:
            raise ProtocolError(f"malformed ciphertext: {exc}") from None
        if any(c.level != params.max_level for c in cts):
            raise ProtocolError(f"request ciphertexts must be at level {params.max_level}", ErrorCode.LEVEL)

        d, n = layout.d, layout.n
        if ad.pll is not None:
            rnd = sample_round(ad.pll, d, session.rng)
            qt, bound = rnd.qt, junk_bound(ad.pll.config.q)
        else:
            rnd, qt, bound = None, np.zeros((d, n)), junk_bound(0.0)
        try:
            packed = PackedMatrix(layout, cts)
            ops = build_server_operands(ad.a1, ad.a2, qt, layout, params, junk_rng=session.rng, junk_bound=bound,
                                        multipliers=self._multipliers_for(head.adapter_id, layout, params))
            counter = Counter()
            out = he_lora_apply(packed, ops, session.keys, counter=counter, workers=self.workers)
        except ckks.LevelError as exc:
            raise ProtocolError(str(exc), ErrorCode.LEVEL) from None
        except (ckks.CkksError, LayoutError) as exc:
            raise ProtocolError(str(exc)) from None
        if self.rounds is not None:
            with self._lock:
                self.rounds.append(RoundRecord(session.session_id, head.adapter_id, head.t, rnd, ops.offset_slots))
        session.calls += 1

        blobs = [ser.dump_ciphertext(c) for c in out.ciphertexts]
        chunks = chunk_ciphertexts(blobs, max_frame_size())
        for i, (first, part) in enumerate(chunks):
            resp = LoraMsg(head.t, head.adapter_id, i, len(chunks), head.layout, first, tuple(part))
            self._send(sock, session, MsgType.LORA_RESP, resp.encode())
