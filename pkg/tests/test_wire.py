import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitf.errors import EncodeError, ProtocolError, SplitError
from splitf.wire import (CodecStats, Frame, FrameHeader, decode_frame, encode_frame, f16_decode, f16_encode,
                         frame_mask, frame_tensor, make_tensor_frame, parse_header, read_frame)
from wire_gen import mutate, random_frame


def test_f16_constants():
    assert f16_encode([1.0]) == b"\x00\x3c"
    assert f16_encode([0.0]) == b"\x00\x00"
    assert f16_decode(b"\x00\x3c")[0] == 1.0


@settings(max_examples=200)
@given(st.floats(-6.5e4, 6.5e4, allow_nan=False, width=32))
def test_f16_matches_struct_oracle(x):
    assert f16_encode([x]) == struct.pack("<e", x)


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_f16_round_trip_within_one_ulp(x):
    y = float(f16_decode(f16_encode([x]))[0])
    assert abs(y - x) <= float(np.spacing(np.float16(abs(x))))


def test_f16_clamps_and_counts():
    stats = CodecStats()
    out = f16_decode(f16_encode([1e6, -1e6, 3.0], stats))
    assert list(out) == [65504.0, -65504.0, 3.0]
    assert stats.clamped == 2 and stats.encoded_values == 3


def test_length_prefix_is_little_endian():
    frame = Frame(FrameHeader(kind="ping", session_id="x" * 43))
    header = json.dumps(frame.header.to_json(), separators=(",", ":")).encode()
    assert len(header) == 100
    assert encode_frame(frame)[:4] == b"\x64\x00\x00\x00"


def test_payload_size_for_one_4096_token():
    frame = make_tensor_frame("step", "s", np.zeros((1, 4096), np.float32), "f16", positions=[0])
    assert len(frame.tensor_bytes) == 8192


def test_payload_size_mismatch_is_encode_error():
    bad = Frame(FrameHeader(kind="response", tensor_shape=[1, 64], dtype="f16"), b"\x00" * 100)
    with pytest.raises(EncodeError):
        encode_frame(bad)


@pytest.mark.parametrize("header", [
    FrameHeader(kind="nope"),
    FrameHeader(kind="step", tensor_shape=[2, 4], positions=[0]),   # pos length
    FrameHeader(kind="response", keep_indices=[2, 1]),
    FrameHeader(kind="response", dtype="bf16"),
    FrameHeader(kind="response", crop_pos=-1),
])
def test_invalid_headers_refused_on_encode(header):
    with pytest.raises(EncodeError):
        encode_frame(Frame(header, b""))


def test_mask_needs_shape():
    with pytest.raises(EncodeError):
        encode_frame(Frame(FrameHeader(kind="response"), b"", b"\x00\x00"))


def test_tensor_and_mask_survive(weights):
    values = np.random.default_rng(0).normal(size=(3, 64)).astype(np.float32)
    mask = np.where(np.tril(np.ones((3, 5))), 0.0, -np.inf)[None, None]
    frame = make_tensor_frame("step", "s", values, "f32", positions=[4, 5, 6], mask=mask)
    back = decode_frame(encode_frame(frame))
    assert np.array_equal(frame_tensor(back), values)
    assert np.array_equal(frame_mask(back), mask)


@settings(max_examples=300)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_is_bit_exact(seed):
    frame = random_frame(np.random.default_rng(seed))
    data = encode_frame(frame)
    back = decode_frame(data)
    assert back == frame
    assert encode_frame(back) == data


@settings(max_examples=300)
@given(st.integers(0, 2**32 - 1))
def test_mutated_input_is_categorized(seed):
    rng = np.random.default_rng(seed)
    data = mutate(encode_frame(random_frame(rng)), rng)
    try:
        decode_frame(data)
    except ProtocolError as exc:
        assert exc.kind in {"truncated", "overrun", "json", "schema", "trailing"}


@given(st.binary(max_size=64))
def test_arbitrary_bytes_never_crash(data):
    try:
        decode_frame(data)
    except SplitError:
        pass


def test_short_and_overrunning_input():
    with pytest.raises(ProtocolError) as e:
        decode_frame(b"\x01\x00")
    assert e.value.kind == "truncated"
    with pytest.raises(ProtocolError) as e:
        decode_frame(b"\xff\x00\x00\x00{}")
    assert e.value.kind == "overrun"


def test_trailing_bytes_rejected():
    data = encode_frame(Frame(FrameHeader(kind="ping")))
    with pytest.raises(ProtocolError) as e:
        decode_frame(data + b"\x00")
    assert e.value.kind == "trailing"


def test_unknown_header_keys_ignored():
    header = b'{"kind":"ping","future":{"x":1}}'
    frame = decode_frame(struct.pack("<I", len(header)) + header)
    assert frame.header.kind == "ping"


@pytest.mark.parametrize("raw", [b"[1]", b"\xff\xfe", b'{"shape":[1]}', b'{"kind":["ping"]}',
                                 b'{"kind":"ping","dtype":{}}', b"[" * 5000],
                         ids=["array", "not-utf8", "no-kind", "kind-list", "dtype-object", "deep-nesting"])
def test_bad_header_documents(raw):
    with pytest.raises(ProtocolError):
        parse_header(raw)


def test_read_frame_from_stream():
    frames = [encode_frame(random_frame(np.random.default_rng(i))) for i in range(5)]
    stream = memoryview(b"".join(frames))
    pos = 0

    def read_exact(n):
        nonlocal pos
        chunk = bytes(stream[pos:pos + n])
        pos += n
        return chunk

    for raw in frames:
        _, got = read_frame(read_exact)
        assert got == raw
