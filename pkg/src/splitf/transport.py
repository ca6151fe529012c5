"""Request/response channels: a TCP socket or an in-process simulated link.

Endpoint descriptors::

    tcp:HOST:PORT
    sim:DELAY_MS[:JITTER_MS[:BYTES_PER_SEC]]

Both channels move encoded frames; the simulated one calls a byte handler
(normally ``SplitServer.handle_bytes``) directly and sleeps the configured
one-way delay on the way out and again on the way back.
"""

from __future__ import annotations

import json
import random
import socket
import statistics
import struct
import time
from dataclasses import dataclass
from typing import BinaryIO, Callable

from .errors import ConfigError, ProtocolError, TransportError
from .wire import Frame, decode_frame, encode_frame, ping_frame, read_frame

DEFAULT_TIMEOUT = 30.0
SPIN_SECONDS = 0.002


def precise_sleep(seconds: float, spin: float = SPIN_SECONDS) -> None:
    """Sleep, then busy-wait the last ``spin`` seconds.

    Plain ``time.sleep`` overshoots by an amount that grows with the delay
    and lets the core cool down, which skews per-step timing at low RTTs.
    """
    end = time.perf_counter() + seconds
    if seconds > spin:
        time.sleep(seconds - spin)
    while time.perf_counter() < end:
        pass


@dataclass(frozen=True)
class LatencyProfile:
    one_way_ms: float = 0.0
    jitter_ms: float = 0.0
    bytes_per_sec: float | None = None

    def __post_init__(self):
        if self.one_way_ms < 0 or self.jitter_ms < 0:
            raise ConfigError("latency values must be non-negative")
        if self.bytes_per_sec is not None and self.bytes_per_sec <= 0:
            raise ConfigError("bandwidth must be positive")


@dataclass(frozen=True)
class Endpoint:
    scheme: str
    host: str = ""
    port: int = 0
    profile: LatencyProfile | None = None


def parse_endpoint(descriptor: str) -> Endpoint:
    parts = descriptor.strip().split(":")
    try:
        if parts[0] == "tcp" and len(parts) == 3:
            return Endpoint("tcp", parts[1], int(parts[2]))
        if parts[0] == "sim" and 2 <= len(parts) <= 4:
            delay = float(parts[1])
            jitter = float(parts[2]) if len(parts) > 2 else 0.0
            bw = float(parts[3]) if len(parts) > 3 else None
            return Endpoint("sim", profile=LatencyProfile(delay, jitter, bw))
    except ValueError as exc:
        raise ConfigError(f"bad endpoint {descriptor!r}: {exc}") from exc
    raise ConfigError(f"bad endpoint {descriptor!r}; expected tcp:HOST:PORT or sim:DELAY_MS[:JITTER_MS[:BPS]]")


class Channel:
    """One persistent, ordered, lockstep request/response link."""

    tag = "abstract"

    def __init__(self, timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout
        self.closed = False
        self.bytes_up = 0
        self.bytes_down = 0

    def exchange(self, request: Frame) -> Frame:
        if self.closed:
            raise TransportError("channel is closed")
        data = encode_frame(request)
        try:
            raw = self._roundtrip(data)
        except TransportError:
            self.closed = True
            raise
        self.bytes_up += len(data)
        self.bytes_down += len(raw)
        return decode_frame(raw)

    def _roundtrip(self, data: bytes) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SimChannel(Channel):
    """In-process link with deterministic injected latency.

    Jitter is uniform in ``[-jitter, +jitter]`` per direction (delay floored
    at zero) from a ``random.Random(seed)``; fixed seed and request sequence
    give identical latencies. ``sleep`` can be swapped for a virtual clock.
    """

    tag = "sim"

    def __init__(self, handler: Callable[[bytes], bytes], profile: LatencyProfile,
                 seed: int = 0, timeout: float = DEFAULT_TIMEOUT,
                 sleep: Callable[[float], None] = precise_sleep):
        super().__init__(timeout)
        self.handler = handler
        self.profile = profile
        self.rng = random.Random(seed)
        self.sleep = sleep
        self.injected_ms: list[float] = []

    def _delay_ms(self, nbytes: int) -> float:
        p = self.profile
        delay = p.one_way_ms
        if p.jitter_ms:
            delay = max(0.0, delay + self.rng.uniform(-p.jitter_ms, p.jitter_ms))
        if p.bytes_per_sec:
            delay += 1000.0 * nbytes / p.bytes_per_sec
        return delay

    def _roundtrip(self, data: bytes) -> bytes:
        up = self._delay_ms(len(data))
        if up:
            self.sleep(up / 1000.0)
        try:
            raw = self.handler(data)
        except (ConnectionError, OSError) as exc:
            raise TransportError(f"simulated peer failed: {exc}") from exc
        down = self._delay_ms(len(raw))
        if up + down > self.timeout * 1000.0:
            raise TransportError(f"timed out after {self.timeout}s")
        if down:
            self.sleep(down / 1000.0)
        self.injected_ms.append(up + down)
        return raw


class TcpChannel(Channel):
    tag = "tcp"

    def __init__(self, host: str, port: int, timeout: float = DEFAULT_TIMEOUT):
        super().__init__(timeout)
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.settimeout(timeout)
        self.address = (host, port)

    def _read_exact(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self.sock.recv(min(n - got, 1 << 20))
            except socket.timeout as exc:
                raise TransportError(f"timed out after {self.timeout}s") from exc
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                raise TransportError("peer closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def _roundtrip(self, data: bytes) -> bytes:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc
        _, raw = read_frame(self._read_exact)
        return raw

    def close(self) -> None:
        if not self.closed:
            try:
                self.sock.close()
            finally:
                self.closed = True


def open_channel(descriptor: str, handler: Callable[[bytes], bytes] | None = None,
                 timeout: float = DEFAULT_TIMEOUT, seed: int = 0) -> Channel:
    """Connect to ``descriptor``. ``sim:`` endpoints need the in-process ``handler``."""
    ep = parse_endpoint(descriptor)
    if ep.scheme == "tcp":
        return TcpChannel(ep.host, ep.port, timeout)
    if handler is None:
        raise ConfigError("a simulated endpoint needs an in-process handler")
    return SimChannel(handler, ep.profile, seed=seed, timeout=timeout)


def exchange(channel: Channel, request: Frame) -> Frame:
    return channel.exchange(request)


def measure_rtt(channel: Channel, n_pings: int = 20) -> float:
    """Median wall-clock milliseconds of ``n_pings`` ping/pong exchanges."""
    if n_pings < 1:
        raise ConfigError("n_pings must be at least 1")
    samples = []
    for _ in range(n_pings):
        t0 = time.perf_counter()
        reply = channel.exchange(ping_frame())
        samples.append((time.perf_counter() - t0) * 1000.0)
        if reply.header.kind == "error":
            raise ProtocolError(f"ping rejected: {reply.header.error_msg}", kind="remote")
    return statistics.median(samples)


class RecordingChannel:
    """Wraps a channel and appends every frame to a transcript file.

    Record layout: one direction byte (``>`` request, ``<`` response,
    ``M`` metadata JSON), a u32 LE length, then the encoded bytes.
    """

    def __init__(self, inner: Channel, sink: BinaryIO, meta: dict | None = None):
        self.inner = inner
        self.sink = sink
        self.tag = inner.tag
        self.timeout = inner.timeout
        if meta is not None:
            self._write(b"M", json.dumps(meta, sort_keys=True).encode("utf-8"))

    def _write(self, direction: bytes, payload: bytes) -> None:
        self.sink.write(direction + struct.pack("<I", len(payload)) + payload)

    def exchange(self, request: Frame) -> Frame:
        reply = self.inner.exchange(request)
        self._write(b">", encode_frame(request))
        self._write(b"<", encode_frame(reply))
        self.sink.flush()
        return reply

    @property
    def closed(self) -> bool:
        return self.inner.closed

    def close(self) -> None:
        self.inner.close()


def read_transcript(data: bytes) -> list[tuple[str, bytes]]:
    records, offset = [], 0
    while offset < len(data):
        if offset + 5 > len(data):
            raise ProtocolError("truncated transcript record", kind="truncated")
        direction = chr(data[offset])
        (n,) = struct.unpack_from("<I", data, offset + 1)
        start = offset + 5
        if start + n > len(data):
            raise ProtocolError("transcript record overruns file", kind="overrun")
        records.append((direction, data[start:start + n]))
        offset = start + n
    return records
