"""The untrusted middle-layer host.

A :class:`SplitServer` owns only the weights of its hosted layer range and
one KV cache per session. It sees hidden states, positions and masks; token
ids, embeddings and logits never reach it.

Speculative batches leave a *provisional tail* in the session cache. The
next request resolves it before doing anything else: ``accept_and_step``
keeps the listed tail entries (compacted right after the committed prefix),
a plain ``step`` commits the whole tail.
"""

from __future__ import annotations

import logging
import socketserver
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np

from .errors import (CapacityError, ConfigError, ProtocolError, SessionError,
                     SplitError)
from .tinyformer import HiddenStates, KVCache, Weights, forward_layers
from .wire import (Frame, FrameHeader, decode_frame, encode_frame, error_frame,
                   frame_mask, frame_tensor, make_tensor_frame, read_frame)

log = logging.getLogger(__name__)


@dataclass
class ServerConfig:
    layer_range: range
    session_expiry: float = 300.0
    max_sessions: int = 64
    dtype: str | None = None  # response dtype; None mirrors the request

    def validate(self, n_layers: int) -> None:
        r = self.layer_range
        if len(r) == 0 or r.step != 1 or r.start < 1 or r.stop > n_layers - 1:
            raise ConfigError(
                f"hosted layers {r.start}..{r.stop} must be a non-empty range strictly inside 0..{n_layers}"
            )


@dataclass
class Session:
    session_id: str
    cache: KVCache
    committed_len: int = 0
    tail_len: int = 0
    last_active: float = 0.0
    lock: threading.Lock = field(default_factory=threading.Lock)


class SplitServer:
    def __init__(self, weights: Weights, config: ServerConfig, clock=time.monotonic):
        config.validate(weights.config.n_layers)
        self.config = config
        self.weights = weights.subset(config.layer_range)
        self.model_config = weights.config
        self.clock = clock
        self.sessions: dict[str, Session] = {}
        self._table_lock = threading.Lock()

    # -- cache primitives -------------------------------------------------

    def crop_session_cache(self, session: Session, pos: int) -> None:
        """Roll every hosted layer back to ``pos`` entries."""
        if pos > session.cache.length:
            raise ProtocolError(f"crop {pos} beyond session length {session.cache.length}", kind="state")
        session.cache.crop(pos)
        session.committed_len = pos
        session.tail_len = 0

    def relocate_session_cache(self, session: Session, keep: list[int]) -> None:
        """Keep ``keep`` (indices into the provisional tail), drop the rest."""
        if any(k >= session.tail_len for k in keep):
            raise ProtocolError(
                f"keep {keep} indexes past the provisional tail of {session.tail_len}", kind="state"
            )
        session.cache.compact(session.committed_len, keep)
        session.committed_len += len(keep)
        session.tail_len = 0

    def expire_sessions(self, now: float | None = None) -> int:
        now = self.clock() if now is None else now
        with self._table_lock:
            stale = [sid for sid, s in self.sessions.items()
                     if now - s.last_active > self.config.session_expiry]
            for sid in stale:
                del self.sessions[sid]
        if stale:
            log.info("expired %d session(s)", len(stale))
        return len(stale)

    # -- request handlers -------------------------------------------------

    def _hidden_in(self, frame: Frame) -> HiddenStates:
        h = frame.header
        d = self.model_config.hidden_dim
        if len(h.tensor_shape) != 2 or h.tensor_shape[1] != d or h.tensor_shape[0] < 1:
            raise ProtocolError(f"expected hidden states [seq, {d}], got {h.tensor_shape}", kind="shape")
        if h.positions is None:
            raise ProtocolError("request lacks positions", kind="schema")
        data = frame_tensor(frame)
        if not np.all(np.isfinite(data)):
            raise ProtocolError("non-finite hidden state", kind="shape")
        return HiddenStates(data, h.positions)

    def _reply(self, frame: Frame, out: HiddenStates, t0: float) -> Frame:
        dtype = self.config.dtype or frame.header.dtype
        return make_tensor_frame("response", frame.header.session_id, out.data, dtype,
                                 srv_ms=(time.perf_counter() - t0) * 1000.0)

    def handle_prompt(self, frame: Frame) -> Frame:
        t0 = time.perf_counter()
        h = self._hidden_in(frame)
        if h.seq > self.model_config.max_seq_len:
            raise CapacityError(f"prompt of {h.seq} exceeds max_seq_len {self.model_config.max_seq_len}")
        sid = frame.header.session_id or uuid.uuid4().hex
        session = Session(sid, KVCache(self.model_config, self.config.layer_range),
                          last_active=self.clock())
        with self._table_lock:
            if sid not in self.sessions and len(self.sessions) >= self.config.max_sessions:
                raise CapacityError(f"session table full ({self.config.max_sessions})")
            # a prompt always reinitializes the session
            self.sessions[sid] = session
        with session.lock:
            out = forward_layers(self.weights, self.config.layer_range, h, session.cache,
                                 frame_mask(frame))
            session.committed_len = session.cache.length
            session.tail_len = 0
        return self._reply(frame, out, t0)

    def handle_step(self, frame: Frame) -> Frame:
        t0 = time.perf_counter()
        hdr = frame.header
        with self._table_lock:
            session = self.sessions.get(hdr.session_id)
        if session is None:
            raise SessionError(f"unknown or expired session {hdr.session_id!r}")
        with session.lock:
            session.last_active = self.clock()
            h = self._hidden_in(frame)
            if hdr.kind == "accept_and_step":
                if hdr.keep_indices is None:
                    raise ProtocolError("accept_and_step without keep", kind="schema")
                self.relocate_session_cache(session, hdr.keep_indices)
            elif hdr.keep_indices is not None:
                raise ProtocolError("keep is only valid on accept_and_step", kind="schema")
            else:
                session.committed_len = session.cache.length
                session.tail_len = 0
            if hdr.crop_pos is not None:
                self.crop_session_cache(session, hdr.crop_pos)
            mask = frame_mask(frame)
            out = forward_layers(self.weights, self.config.layer_range, h, session.cache, mask)
            session.tail_len = h.seq
            session.committed_len = session.cache.length - h.seq
        return self._reply(frame, out, t0)

    def handle(self, frame: Frame) -> Frame:
        """Dispatch one request. Failures come back as ``error`` frames."""
        sid = frame.header.session_id
        try:
            self.expire_sessions()
            kind = frame.header.kind
            if kind == "ping":
                r = self.config.layer_range
                return Frame(FrameHeader(kind="response", session_id=sid, layers=[r.start, r.stop]))
            if kind == "prompt":
                return self.handle_prompt(frame)
            if kind in ("step", "accept_and_step"):
                return self.handle_step(frame)
            raise ProtocolError(f"server cannot handle {kind!r} frames", kind="schema")
        except SplitError as exc:
            return error_frame(sid, exc)
        except Exception as exc:  # keep the connection alive on bugs
            log.exception("unhandled error")
            return error_frame(sid, SplitError(f"{type(exc).__name__}: {exc}"))

    def handle_bytes(self, data: bytes) -> bytes:
        try:
            frame = decode_frame(data)
        except ProtocolError as exc:
            return encode_frame(error_frame("", exc))
        return encode_frame(self.handle(frame))

    def session(self, session_id: str) -> Session:
        with self._table_lock:
            try:
                return self.sessions[session_id]
            except KeyError:
                raise SessionError(f"unknown session {session_id!r}") from None


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        server: SplitServer = self.server.split_server
        sock = self.request

        def read_exact(n):
            buf = bytearray()
            while len(buf) < n:
                chunk = sock.recv(n - len(buf))
                if not chunk:
                    raise ConnectionError("client closed")
                buf.extend(chunk)
            return bytes(buf)

        while True:
            try:
                frame, _ = read_frame(read_exact)
            except ConnectionError:
                return
            except ProtocolError as exc:
                # framing is lost after a bad header; report and hang up
                sock.sendall(encode_frame(error_frame("", exc)))
                return
            except OSError:
                return
            try:
                sock.sendall(encode_frame(server.handle(frame)))
            except OSError:
                return


class TcpFrameServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, split_server: SplitServer, host: str, port: int, sweep_interval: float = 30.0):
        super().__init__((host, port), _FrameHandler)
        self.split_server = split_server
        self._stop = threading.Event()
        self._sweeper = threading.Thread(target=self._sweep, args=(sweep_interval,), daemon=True)
        self._sweeper.start()

    def _sweep(self, interval: float) -> None:
        while not self._stop.wait(interval):
            self.split_server.expire_sessions()

    @property
    def port(self) -> int:
        return self.server_address[1]

    def server_close(self):
        self._stop.set()
        super().server_close()


def start_tcp_server(split_server: SplitServer, host: str = "127.0.0.1", port: int = 0) -> TcpFrameServer:
    """Start serving on a background thread; returns the running server."""
    srv = TcpFrameServer(split_server, host, port)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    return srv
