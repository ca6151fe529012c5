"""The trusted local side of a split generation.

The client owns the embedding, the first ``prefix_layers`` and last
``suffix_layers`` transformer layers, the final norm and the LM head. Both
local layer groups keep their own KV cache and replay exactly the
provisional-tail protocol the server applies to its middle layers, so all
three caches have the same committed length at every step boundary.

Decoders talk to an *engine* through four calls: ``prefill``, ``run_batch``,
``resolve`` and ``committed_len``. :class:`SplitClient` implements them over
a channel; :class:`LocalEngine` implements them monolithically.
"""

from __future__ import annotations

import time
import uuid
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (ConfigError, DesyncError, InputError, ProtocolError, SplitError,
                     TransportError, error_from_message)
from .server import ServerConfig, SplitServer
from .tinyformer import HiddenStates, KVCache, Weights, embed, finalize, forward_layers
from .transport import Channel, RecordingChannel, measure_rtt, open_channel, parse_endpoint
from .wire import frame_tensor, make_tensor_frame, ping_frame


@dataclass(frozen=True)
class SplitConfig:
    prefix_layers: int = 2
    suffix_layers: int = 2
    dtype: str = "f32"

    def validate(self, n_layers: int) -> None:
        if self.prefix_layers < 1 or self.suffix_layers < 1:
            raise ConfigError("prefix and suffix must each keep at least one layer local")
        if self.prefix_layers + self.suffix_layers >= n_layers:
            raise ConfigError(
                f"prefix {self.prefix_layers} + suffix {self.suffix_layers} leaves no remote layers of {n_layers}"
            )
        if self.dtype not in ("f16", "f32"):
            raise ConfigError(f"dtype must be f16 or f32, got {self.dtype!r}")

    def remote_range(self, n_layers: int) -> range:
        return range(self.prefix_layers, n_layers - self.suffix_layers)


@dataclass
class StepTiming:
    wall_ms: float
    rtt_ms: float = 0.0
    local_ms: float = 0.0
    remote_reported_ms: float = 0.0
    serialization_ms: float = 0.0
    exchange_ms: float = 0.0
    batch_len: int = 0
    bytes_up: int = 0
    bytes_down: int = 0


class LocalEngine:
    """Whole model in one process, behind the same batch interface."""

    def __init__(self, weights: Weights):
        self.weights = weights
        self.config = weights.config
        self.cache = KVCache(self.config, range(self.config.n_layers))
        self.committed = 0
        self._tail = 0
        self.last_timing: StepTiming | None = None

    @property
    def committed_len(self) -> int:
        return self.committed

    @property
    def max_seq_len(self) -> int:
        return self.config.max_seq_len

    def prefill(self, prompt: Sequence[int]) -> np.ndarray:
        prompt = list(prompt)
        if not prompt:
            raise InputError("prompt must be non-empty")
        t0 = time.perf_counter()
        self.cache = KVCache(self.config, range(self.config.n_layers))
        h = forward_layers(self.weights, range(self.config.n_layers), embed(self.weights, prompt), self.cache)
        logits, _ = finalize(self.weights, HiddenStates(h.data[-1:], h.positions[-1:]))
        self.committed = self.cache.length
        self.last_timing = StepTiming(wall_ms=(time.perf_counter() - t0) * 1000.0, batch_len=len(prompt))
        return logits[0]

    def run_batch(self, tokens, positions, mask=None) -> np.ndarray:
        t0 = time.perf_counter()
        if self._tail:
            self.resolve(None)
        h = embed(self.weights, tokens, positions=positions)
        h = forward_layers(self.weights, range(self.config.n_layers), h, self.cache, mask)
        logits, _ = finalize(self.weights, h)
        self._tail = len(tokens)
        self.last_timing = StepTiming(wall_ms=(time.perf_counter() - t0) * 1000.0, batch_len=len(tokens))
        return logits

    def resolve(self, keep: Sequence[int] | None) -> None:
        if keep is not None:
            self.cache.compact(self.committed, list(keep))
        self.committed = self.cache.length
        self._tail = 0

    def close(self) -> None:
        pass


class SplitClient:
    """Local half of a split pipeline bound to one remote session."""

    def __init__(self, weights: Weights, split: SplitConfig, channel: Channel,
                 session_id: str | None = None, rtt_ms: float = 0.0, verify_layers: bool = True):
        cfg = weights.config
        split.validate(cfg.n_layers)
        self.config = cfg
        self.split = split
        self.prefix_range = range(0, split.prefix_layers)
        self.remote_range = split.remote_range(cfg.n_layers)
        self.suffix_range = range(cfg.n_layers - split.suffix_layers, cfg.n_layers)
        self.weights = Weights(cfg, weights.embedding,
                               {i: weights.layers[i] for i in (*self.prefix_range, *self.suffix_range)},
                               weights.final_norm, weights.lm_head)
        self.channel = channel
        self.session_id = session_id or uuid.uuid4().hex
        self.rtt_ms = rtt_ms
        self.timings: list[StepTiming] = []
        self.last_timing: StepTiming | None = None
        self._reset_caches()
        if verify_layers:
            self._check_remote_layers()

    def _reset_caches(self) -> None:
        self.prefix_cache = KVCache(self.config, self.prefix_range)
        self.suffix_cache = KVCache(self.config, self.suffix_range)
        self.committed = 0
        self.tail = 0
        self.pending_keep: list[int] | None = None

    @property
    def committed_len(self) -> int:
        return self.committed

    @property
    def max_seq_len(self) -> int:
        return self.config.max_seq_len

    def _check_remote_layers(self) -> None:
        reply = self._exchange(ping_frame(self.session_id))
        layers = reply.header.layers
        if layers and list(layers) != [self.remote_range.start, self.remote_range.stop]:
            raise ConfigError(
                f"server hosts layers {layers[0]}..{layers[1]}, client expects "
                f"{self.remote_range.start}..{self.remote_range.stop}"
            )

    def _exchange(self, frame):
        try:
            reply = self.channel.exchange(frame)
        except TransportError:
            self.close()
            raise
        if reply.header.kind == "error":
            raise error_from_message(reply.header.error_msg or "internal: empty error")
        return reply

    def measure_rtt(self, n_pings: int = 20) -> float:
        self.rtt_ms = measure_rtt(self.channel, n_pings)
        return self.rtt_ms

    # -- the three local stages ---------------------------------------------

    def _prefix(self, tokens, positions, mask) -> HiddenStates:
        h = embed(self.weights, tokens, positions=positions)
        return forward_layers(self.weights, self.prefix_range, h, self.prefix_cache, mask)

    def step_remote(self, hidden: HiddenStates, mask: np.ndarray | None = None,
                    crop_pos: int | None = None, keep_indices: Sequence[int] | None = None,
                    kind: str | None = None) -> HiddenStates:
        """One exchange through the remote layers. Records timing on ``self``."""
        if self.channel.closed:
            raise TransportError("session is closed")
        if kind is None:
            kind = "accept_and_step" if keep_indices is not None else "step"
        t0 = time.perf_counter()
        fields = {"positions": [int(p) for p in hidden.positions]}
        if crop_pos is not None:
            fields["crop_pos"] = int(crop_pos)
        if keep_indices is not None:
            fields["keep_indices"] = [int(k) for k in keep_indices]
        if mask is not None:
            fields["mask"] = mask
        request = make_tensor_frame(kind, self.session_id, hidden.data, self.split.dtype, **fields)
        t1 = time.perf_counter()
        reply = self._exchange(request)
        t2 = time.perf_counter()
        out = frame_tensor(reply)
        t3 = time.perf_counter()
        if out.shape != hidden.data.shape:
            raise ProtocolError(f"response shape {out.shape} != request {hidden.data.shape}", kind="shape")
        self._remote_timing = StepTiming(
            wall_ms=0.0,
            rtt_ms=self.rtt_ms,
            remote_reported_ms=reply.header.srv_ms or 0.0,
            serialization_ms=((t1 - t0) + (t3 - t2)) * 1000.0,
            exchange_ms=(t2 - t1) * 1000.0,
            batch_len=hidden.seq,
            bytes_up=len(request.tensor_bytes) + len(request.mask_bytes or b""),
            bytes_down=len(reply.tensor_bytes),
        )
        return HiddenStates(out, hidden.positions)

    def local_suffix_finalize(self, hidden: HiddenStates, mask: np.ndarray | None = None) -> np.ndarray:
        if self.suffix_cache.length + hidden.seq != self.prefix_cache.length:
            raise DesyncError("local prefix and suffix caches disagree")
        h = forward_layers(self.weights, self.suffix_range, hidden, self.suffix_cache, mask)
        logits, _ = finalize(self.weights, h)
        return logits

    # -- engine interface -----------------------------------------------------

    def prefill(self, prompt: Sequence[int]) -> np.ndarray:
        """Send the whole prompt in one round trip; return the last row's logits."""
        prompt = list(prompt)
        if not prompt:
            raise InputError("prompt must be non-empty")
        t0 = time.perf_counter()
        self._reset_caches()
        try:
            h = self._prefix(prompt, list(range(len(prompt))), None)
            h = self.step_remote(h, kind="prompt")
            logits = self.local_suffix_finalize(h)
        except TransportError:
            raise
        except SplitError:
            self.close()
            raise
        self.committed = len(prompt)
        self._record(t0)
        return logits[-1]

    def run_batch(self, tokens: Sequence[int], positions: Sequence[int],
                  mask: np.ndarray | None = None) -> np.ndarray:
        """Push a batch through prefix, remote and suffix layers; logits per row."""
        t0 = time.perf_counter()
        if self.tail:
            self.resolve(None)
        keep, self.pending_keep = self.pending_keep, None
        try:
            h = self._prefix(tokens, positions, mask)
            h = self.step_remote(h, mask=mask, keep_indices=keep)
            logits = self.local_suffix_finalize(h, mask)
        except TransportError:
            raise
        except SplitError:
            self.close()
            raise
        self.tail = len(tokens)
        self._record(t0)
        return logits

    def resolve(self, keep: Sequence[int] | None) -> None:
        """Settle the last batch's provisional entries.

        ``None`` keeps all of them (sequential steps). Local caches are
        compacted now; the server gets the same ``keep`` on the next request.
        """
        if keep is not None:
            keep = [int(k) for k in keep]
            for cache in (self.prefix_cache, self.suffix_cache):
                cache.compact(self.committed, keep)
        self.pending_keep = keep
        self.committed = self.prefix_cache.length
        self.tail = 0
        if self.suffix_cache.length != self.committed:
            raise DesyncError("local prefix and suffix caches out of step")

    def _record(self, t0: float) -> None:
        remote = self._remote_timing
        wall = (time.perf_counter() - t0) * 1000.0
        remote.wall_ms = wall
        remote.local_ms = max(0.0, wall - remote.exchange_ms - remote.serialization_ms)
        self.last_timing = remote
        self.timings.append(remote)

    def close(self) -> None:
        self.channel.close()


def connect(weights: Weights, split: SplitConfig, endpoint: str, seed: int = 0,
            transcript=None, timeout: float = 30.0, rtt_pings: int = 0) -> SplitClient:
    """Build a client for ``endpoint``.

    ``sim:`` endpoints get an in-process :class:`SplitServer` hosting the
    middle layers behind a :class:`SimChannel`. ``transcript`` is an open
    binary file that receives every frame.
    """
    split.validate(weights.config.n_layers)
    if parse_endpoint(endpoint).scheme == "sim":
        server = SplitServer(weights, ServerConfig(split.remote_range(weights.config.n_layers)))
        channel = open_channel(endpoint, handler=server.handle_bytes, timeout=timeout, seed=seed)
    else:
        channel = open_channel(endpoint, timeout=timeout)
    if transcript is not None:
        cfg = weights.config
        channel = RecordingChannel(channel, transcript,
                                   meta={"hidden_dim": cfg.hidden_dim, "vocab_size": cfg.vocab_size,
                                         "dtype": split.dtype})
    client = SplitClient(weights, split, channel)
    if rtt_pings:
        client.measure_rtt(rtt_pings)
    return client
