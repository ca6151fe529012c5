"""Binary activation-transfer frames.

Layout, no padding anywhere::

    [u32 LE header length][UTF-8 JSON header][tensor bytes][mask bytes]

Tensor bytes are little-endian binary16 (``dtype="f16"``) or binary32
(``"f32"``). Mask bytes are always binary16 and only present when the
header carries ``mask_shape``. See PROTOCOL.md for the field table.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import EncodeError, ProtocolError

KINDS = ("prompt", "step", "accept_and_step", "response", "error", "ping")
REQUEST_KINDS = ("prompt", "step", "accept_and_step")
DTYPE_WIDTH = {"f16": 2, "f32": 4}
MASK_WIDTH = 2
F16_MAX = float(np.finfo(np.float16).max)
MAX_HEADER_BYTES = 1 << 20


@dataclass
class CodecStats:
    clamped: int = 0
    encoded_values: int = 0

    def reset(self) -> None:
        self.clamped = 0
        self.encoded_values = 0


codec_stats = CodecStats()


def f16_encode(values, stats: CodecStats | None = None) -> bytes:
    """Round-to-nearest-even binary16. Magnitudes above 65504 clamp to it."""
    stats = codec_stats if stats is None else stats
    arr = np.asarray(values, dtype=np.float64)
    over = np.abs(arr) > F16_MAX
    n_over = int(np.count_nonzero(over))
    if n_over:
        arr = np.clip(arr, -F16_MAX, F16_MAX)
    stats.clamped += n_over
    stats.encoded_values += arr.size
    return arr.astype("<f2").tobytes()


def f16_decode(data: bytes, shape=None) -> np.ndarray:
    out = np.frombuffer(data, dtype="<f2").astype(np.float32)
    return out if shape is None else out.reshape(shape)


def tensor_to_bytes(values: np.ndarray, dtype: str) -> bytes:
    if dtype == "f16":
        return f16_encode(values)
    if dtype == "f32":
        return np.ascontiguousarray(values, dtype="<f4").tobytes()
    raise EncodeError(f"unknown dtype {dtype!r}")


def bytes_to_tensor(data: bytes, dtype: str, shape) -> np.ndarray:
    if dtype == "f16":
        return f16_decode(data, shape)
    return np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)


def mask_to_bytes(mask: np.ndarray) -> bytes:
    # 0 and -inf are both exact in binary16.
    return np.ascontiguousarray(mask, dtype="<f2").tobytes()


def bytes_to_mask(data: bytes, shape) -> np.ndarray:
    return np.frombuffer(data, dtype="<f2").astype(np.float32).reshape(shape)


@dataclass
class FrameHeader:
    kind: str
    session_id: str = ""
    tensor_shape: list[int] = field(default_factory=lambda: [0])
    dtype: str = "f32"
    positions: list[int] | None = None
    crop_pos: int | None = None
    keep_indices: list[int] | None = None
    mask_shape: list[int] | None = None
    error_msg: str | None = None
    srv_ms: float | None = None
    layers: list[int] | None = None

    def payload_sizes(self) -> tuple[int, int]:
        tensor = math.prod(self.tensor_shape) * DTYPE_WIDTH[self.dtype]
        mask = math.prod(self.mask_shape) * MASK_WIDTH if self.mask_shape is not None else 0
        return tensor, mask

    def to_json(self) -> dict:
        out = {"kind": self.kind, "session_id": self.session_id,
               "shape": list(self.tensor_shape), "dtype": self.dtype}
        for key, value in (("pos", self.positions), ("crop", self.crop_pos),
                           ("keep", self.keep_indices), ("mask_shape", self.mask_shape),
                           ("err", self.error_msg), ("srv_ms", self.srv_ms),
                           ("layers", self.layers)):
            if value is not None:
                out[key] = value
        return out


@dataclass
class Frame:
    header: FrameHeader
    tensor_bytes: bytes = b""
    mask_bytes: bytes | None = None


def _is_count(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _count_list(value, name: str, err) -> list[int]:
    if not isinstance(value, list) or not all(_is_count(v) for v in value):
        raise err(f"{name} must be a list of non-negative integers")
    return value


def _check_header(h: FrameHeader, err) -> None:
    if not isinstance(h.kind, str) or h.kind not in KINDS:
        raise err(f"unknown frame kind {h.kind!r}")
    if not isinstance(h.session_id, str):
        raise err("session_id must be a string")
    if not isinstance(h.dtype, str) or h.dtype not in DTYPE_WIDTH:
        raise err(f"unknown dtype {h.dtype!r}")
    _count_list(h.tensor_shape, "shape", err)
    if h.positions is not None:
        _count_list(h.positions, "pos", err)
        if h.kind in REQUEST_KINDS and (not h.tensor_shape or len(h.positions) != h.tensor_shape[0]):
            raise err("pos length must equal the tensor's sequence dimension")
    if h.crop_pos is not None and not _is_count(h.crop_pos):
        raise err("crop must be a non-negative integer")
    if h.keep_indices is not None:
        keep = _count_list(h.keep_indices, "keep", err)
        if any(b <= a for a, b in zip(keep, keep[1:])):
            raise err("keep must be strictly increasing")
    if h.mask_shape is not None:
        _count_list(h.mask_shape, "mask_shape", err)
    if h.error_msg is not None and not isinstance(h.error_msg, str):
        raise err("err must be a string")
    if h.srv_ms is not None and (isinstance(h.srv_ms, bool) or not isinstance(h.srv_ms, (int, float))):
        raise err("srv_ms must be a number")
    if h.layers is not None:
        _count_list(h.layers, "layers", err)


def encode_frame(frame: Frame) -> bytes:
    h = frame.header
    _check_header(h, EncodeError)
    tensor_size, mask_size = h.payload_sizes()
    if len(frame.tensor_bytes) != tensor_size:
        raise EncodeError(
            f"shape {h.tensor_shape} ({h.dtype}) needs {tensor_size} bytes, got {len(frame.tensor_bytes)}"
        )
    if (h.mask_shape is None) != (frame.mask_bytes is None):
        raise EncodeError("mask_shape and mask bytes must be given together")
    if frame.mask_bytes is not None and len(frame.mask_bytes) != mask_size:
        raise EncodeError(f"mask_shape {h.mask_shape} needs {mask_size} bytes")
    header = json.dumps(h.to_json(), separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<I", len(header)), header, frame.tensor_bytes]
    if frame.mask_bytes is not None:
        parts.append(frame.mask_bytes)
    return b"".join(parts)


def parse_header(raw: bytes) -> FrameHeader:
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise ProtocolError(f"header is not valid JSON: {exc}", kind="json") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("header must be a JSON object", kind="json")
    try:
        h = FrameHeader(
            kind=obj["kind"],
            session_id=obj.get("session_id", ""),
            tensor_shape=obj.get("shape", [0]),
            dtype=obj.get("dtype", "f32"),
            positions=obj.get("pos"),
            crop_pos=obj.get("crop"),
            keep_indices=obj.get("keep"),
            mask_shape=obj.get("mask_shape"),
            error_msg=obj.get("err"),
            srv_ms=obj.get("srv_ms"),
            layers=obj.get("layers"),
        )
    except KeyError as exc:
        raise ProtocolError("header lacks 'kind'", kind="schema") from exc
    _check_header(h, ProtocolError)
    return h


def decode_frame(data: bytes) -> Frame:
    """Inverse of :func:`encode_frame`. Unknown header keys are ignored."""
    data = bytes(data)
    if len(data) < 4:
        raise ProtocolError(f"{len(data)} bytes is shorter than the length prefix", kind="truncated")
    (hlen,) = struct.unpack_from("<I", data, 0)
    if 4 + hlen > len(data):
        raise ProtocolError(f"header length {hlen} overruns {len(data) - 4} remaining bytes", kind="overrun")
    header = parse_header(data[4:4 + hlen])
    tensor_size, mask_size = header.payload_sizes()
    body = data[4 + hlen:]
    need = tensor_size + mask_size
    if len(body) < need:
        raise ProtocolError(f"payload needs {need} bytes, got {len(body)}", kind="truncated")
    if len(body) > need:
        raise ProtocolError(f"{len(body) - need} trailing bytes after payload", kind="trailing")
    mask = body[tensor_size:] if header.mask_shape is not None else None
    return Frame(header, body[:tensor_size], mask)


def read_frame(read_exact: Callable[[int], bytes]) -> tuple[Frame, bytes]:
    """Read one frame from a stream. Returns the frame and its raw bytes.

    ``read_exact(n)`` must return exactly ``n`` bytes or raise.
    """
    prefix = read_exact(4)
    (hlen,) = struct.unpack("<I", prefix)
    if hlen > MAX_HEADER_BYTES:
        raise ProtocolError(f"header length {hlen} exceeds limit", kind="overrun")
    raw_header = read_exact(hlen)
    header = parse_header(raw_header)
    tensor_size, mask_size = header.payload_sizes()
    body = read_exact(tensor_size + mask_size)
    mask = body[tensor_size:] if header.mask_shape is not None else None
    return Frame(header, body[:tensor_size], mask), prefix + raw_header + body


def make_tensor_frame(kind: str, session_id: str, values: np.ndarray, dtype: str, **fields) -> Frame:
    values = np.asarray(values)
    mask = fields.pop("mask", None)
    header = FrameHeader(kind=kind, session_id=session_id, tensor_shape=list(values.shape),
                         dtype=dtype, **fields)
    mask_bytes = None
    if mask is not None:
        header.mask_shape = list(mask.shape)
        mask_bytes = mask_to_bytes(mask)
    return Frame(header, tensor_to_bytes(values, dtype), mask_bytes)


def frame_tensor(frame: Frame) -> np.ndarray:
    h = frame.header
    return bytes_to_tensor(frame.tensor_bytes, h.dtype, h.tensor_shape)


def frame_mask(frame: Frame) -> np.ndarray | None:
    if frame.mask_bytes is None:
        return None
    return bytes_to_mask(frame.mask_bytes, frame.header.mask_shape)


def ping_frame(session_id: str = "") -> Frame:
    return Frame(FrameHeader(kind="ping", session_id=session_id))


def error_frame(session_id: str, exc: Exception) -> Frame:
    return Frame(FrameHeader(kind="error", session_id=session_id, error_msg=str(exc)))
