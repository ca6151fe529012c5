import io
import socket
import threading
import time

import numpy as np
import pytest

from splitf.errors import ConfigError, ProtocolError, TransportError
from splitf.transport import (LatencyProfile, RecordingChannel, SimChannel, TcpChannel, exchange, measure_rtt,
                              open_channel, parse_endpoint, precise_sleep, read_transcript)
from splitf.wire import Frame, FrameHeader, decode_frame, encode_frame, make_tensor_frame, read_frame


def echo(data: bytes) -> bytes:
    frame = decode_frame(data)
    frame.header.kind = "response"
    return encode_frame(frame)


def tensor_request(seed=0):
    values = np.random.default_rng(seed).normal(size=(2, 8)).astype(np.float32)
    return make_tensor_frame("step", "s", values, "f32", positions=[0, 1])


def test_parse_endpoint():
    assert parse_endpoint("tcp:127.0.0.1:9000").port == 9000
    ep = parse_endpoint("sim:40:5:1000000")
    assert ep.profile == LatencyProfile(40.0, 5.0, 1e6)
    for bad in ("udp:x:1", "tcp:host", "sim:", "sim:-1", "sim:a"):
        with pytest.raises(ConfigError):
            parse_endpoint(bad)


def test_sim_echo_is_transparent():
    ch = open_channel("sim:0", handler=echo)
    req = tensor_request()
    reply = exchange(ch, req)
    assert reply.tensor_bytes == req.tensor_bytes


def test_sim_needs_handler():
    with pytest.raises(ConfigError):
        open_channel("sim:40")


def test_sim_40ms_exchange_takes_80ms():
    ch = open_channel("sim:40", handler=echo)
    t0 = time.perf_counter()
    ch.exchange(tensor_request())
    assert (time.perf_counter() - t0) * 1000 >= 80.0


def test_sim_rtt_median_in_band():
    ch = open_channel("sim:40", handler=echo)
    assert 80.0 <= measure_rtt(ch, 10) <= 82.0


def test_zero_delay_rtt_is_small():
    assert measure_rtt(open_channel("sim:0", handler=echo), 20) < 5.0


def test_jittered_rtt_within_bound():
    ch = SimChannel(echo, LatencyProfile(10.0, 3.0), seed=4)
    assert 20.0 - 6.0 <= measure_rtt(ch, 5) <= 20.0 + 6.0 + 2.0


def test_sim_latency_deterministic():
    runs = []
    for _ in range(2):
        ch = SimChannel(echo, LatencyProfile(5.0, 4.0, 1e6), seed=11, sleep=lambda s: None)
        for i in range(6):
            ch.exchange(tensor_request(i))
        runs.append(ch.injected_ms)
    assert runs[0] == runs[1] and len(set(runs[0])) > 1


def test_bandwidth_adds_serialization_delay():
    ch = SimChannel(echo, LatencyProfile(0.0, 0.0, 1000.0), sleep=lambda s: None)
    req = tensor_request()
    ch.exchange(req)
    up = len(encode_frame(req))
    down = len(echo(encode_frame(req)))
    assert ch.injected_ms[0] == pytest.approx(up + down)


def test_sim_timeout():
    ch = SimChannel(echo, LatencyProfile(600.0), timeout=1.0, sleep=lambda s: None)
    with pytest.raises(TransportError):
        ch.exchange(tensor_request())
    assert ch.closed


def test_precise_sleep_accuracy():
    t0 = time.perf_counter()
    precise_sleep(0.010)
    elapsed = time.perf_counter() - t0
    assert 0.010 <= elapsed < 0.013


def test_closed_channel_refuses():
    ch = open_channel("sim:0", handler=echo)
    ch.close()
    with pytest.raises(TransportError):
        ch.exchange(tensor_request())
    assert not open_channel("sim:0", handler=echo).closed


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_tcp_closed_port():
    with pytest.raises(TransportError):
        open_channel(f"tcp:127.0.0.1:{_free_port()}", timeout=2)


def _serve_once(behaviour):
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)

    def run():
        conn, _ = srv.accept()
        with conn:
            behaviour(conn)
        srv.close()

    threading.Thread(target=run, daemon=True).start()
    return srv.getsockname()[1]


def _echo_conn(conn):
    def read_exact(n):
        buf = b""
        while len(buf) < n:
            chunk = conn.recv(n - len(buf))
            if not chunk:
                raise ConnectionError
            buf += chunk
        return buf

    try:
        while True:
            frame, _ = read_frame(read_exact)
            frame.header.kind = "response"
            conn.sendall(encode_frame(frame))
    except ConnectionError:
        pass


def test_tcp_echo_in_order():
    port = _serve_once(_echo_conn)
    ch = TcpChannel("127.0.0.1", port, timeout=5)
    reqs = [tensor_request(i) for i in range(5)]
    for req in reqs:
        assert ch.exchange(req).tensor_bytes == req.tensor_bytes
    ch.close()


def test_tcp_peer_close_mid_exchange():
    def half_reply(conn):
        conn.recv(65536)
        conn.sendall(b"\x40\x00\x00\x00{\"kind\"")

    port = _serve_once(half_reply)
    ch = TcpChannel("127.0.0.1", port, timeout=5)
    with pytest.raises(TransportError):
        ch.exchange(tensor_request())
    assert ch.closed


def test_recording_channel_transcript():
    sink = io.BytesIO()
    ch = RecordingChannel(open_channel("sim:0", handler=echo), sink, meta={"hidden_dim": 8})
    req = tensor_request()
    ch.exchange(req)
    records = read_transcript(sink.getvalue())
    assert [d for d, _ in records] == ["M", ">", "<"]
    assert records[1][1] == encode_frame(req)
    ch.close()
    assert ch.closed


def test_transcript_truncation():
    good = b">" + (3).to_bytes(4, "little") + b"abc"
    assert read_transcript(good) == [(">", b"abc")]
    with pytest.raises(ProtocolError):
        read_transcript(good[:-1])


def test_ping_frame_over_echo():
    reply = open_channel("sim:0", handler=echo).exchange(Frame(FrameHeader(kind="ping")))
    assert reply.header.kind == "response"
