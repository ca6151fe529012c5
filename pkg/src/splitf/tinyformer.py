"""A small deterministic decoder-only transformer.

Pre-norm blocks with rotary positions, grouped-query attention driven by
explicit additive masks, a SwiGLU feed-forward and an untied LM head. All
compute is float32; half precision only appears on the wire.

The point of this model is not quality. It is the oracle the split runtime
is checked against, so every function here is a pure function of the
weights and its inputs, and layers can be executed over any half-open range
so that a split pipeline performs exactly the same arithmetic as the
monolithic one.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CapacityError, ConfigError, InputError, NumericError, ProtocolError

DTYPE = np.float32
NEG_INF = np.float32(-np.inf)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    n_layers: int = 8
    hidden_dim: int = 64
    n_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 16
    ffn_dim: int = 256
    max_seq_len: int = 256
    rope_base: float = 10000.0
    rms_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "hidden_dim", "n_heads", "n_kv_heads",
                     "head_dim", "ffn_dim", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.n_heads * self.head_dim != self.hidden_dim:
            raise ConfigError(
                f"n_heads * head_dim ({self.n_heads}*{self.head_dim}) != hidden_dim ({self.hidden_dim})"
            )
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_kv_heads={self.n_kv_heads} does not divide n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.n_layers < 4:
            raise ConfigError("n_layers must be at least 4 to leave a middle segment")
        if not (self.rope_base > 0 and self.rms_eps > 0):
            raise ConfigError("rope_base and rms_eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray

    FIELDS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self.FIELDS]


@dataclass
class Weights:
    """Model parameters.

    ``layers`` maps absolute layer index to its parameters, so a partial copy
    (the server's middle range) keeps the original numbering. ``embedding``,
    ``final_norm`` and ``lm_head`` are ``None`` on such partial copies.
    """

    config: ModelConfig
    embedding: np.ndarray | None
    layers: dict[int, LayerWeights]
    final_norm: np.ndarray | None
    lm_head: np.ndarray | None

    def subset(self, layer_range: range, with_io: bool = False) -> "Weights":
        missing = [i for i in layer_range if i not in self.layers]
        if missing:
            raise ConfigError(f"layers {missing} not present in these weights")
        return Weights(
            config=self.config,
            embedding=self.embedding if with_io else None,
            layers={i: self.layers[i] for i in layer_range},
            final_norm=self.final_norm if with_io else None,
            lm_head=self.lm_head if with_io else None,
        )

    def arrays(self) -> list[np.ndarray]:
        """All parameters in declaration order (full weights only)."""
        if self.embedding is None or self.final_norm is None or self.lm_head is None:
            raise ConfigError("declaration-order export needs full weights")
        out = [self.embedding]
        for i in range(self.config.n_layers):
            out.extend(self.layers[i].arrays())
        out.extend([self.final_norm, self.lm_head])
        return out


def _layer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hd = cfg.hidden_dim, cfg.head_dim
    return {
        "attn_norm": (d,),
        "wq": (d, cfg.n_heads * hd),
        "wk": (d, cfg.n_kv_heads * hd),
        "wv": (d, cfg.n_kv_heads * hd),
        "wo": (cfg.n_heads * hd, d),
        "ffn_norm": (d,),
        "w_gate": (d, cfg.ffn_dim),
        "w_up": (d, cfg.ffn_dim),
        "w_down": (cfg.ffn_dim, d),
    }


def init_weights(config: ModelConfig) -> Weights:
    """Draw every matrix uniformly from [-a, a] with a = 1/sqrt(hidden_dim).

    Draws happen in declaration order from ``numpy.random.Generator(PCG64(seed))``:
    embedding, then for each layer wq, wk, wv, wo, w_gate, w_up, w_down, then
    lm_head. RMS-norm gains are not drawn; they start at 1.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError("init_weights expects a ModelConfig")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    a = 1.0 / math.sqrt(config.hidden_dim)

    def draw(shape):
        return rng.uniform(-a, a, size=shape).astype(DTYPE)

    embedding = draw((config.vocab_size, config.hidden_dim))
    layers = {}
    for i in range(config.n_layers):
        params = {}
        for name, shape in _layer_shapes(config).items():
            params[name] = np.ones(shape, DTYPE) if name.endswith("norm") else draw(shape)
        layers[i] = LayerWeights(**params)
    final_norm = np.ones(config.hidden_dim, DTYPE)
    lm_head = draw((config.hidden_dim, config.vocab_size))
    return Weights(config, embedding, layers, final_norm, lm_head)


def save_weights(path: str | Path, weights: Weights) -> None:
    """Write ``[u32 LE len][config JSON][f32 LE params in declaration order]``."""
    header = json.dumps(weights.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in weights.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path: str | Path) -> Weights:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ConfigError(f"{path}: truncated weight snapshot")
    (hlen,) = struct.unpack_from("<I", data, 0)
    try:
        cfg = ModelConfig.from_dict(json.loads(data[4:4 + hlen].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: bad config header ({exc})") from exc
    template = init_weights(cfg)
    offset = 4 + hlen
    loaded = []
    for arr in template.arrays():
        nbytes = arr.size * 4
        if offset + nbytes > len(data):
            raise ConfigError(f"{path}: truncated parameter data")
        loaded.append(np.frombuffer(data, "<f4", arr.size, offset).reshape(arr.shape).astype(DTYPE))
        offset += nbytes
    if offset != len(data):
        raise ConfigError(f"{path}: {len(data) - offset} trailing bytes")
    it = iter(loaded)
    embedding = next(it)
    layers = {i: LayerWeights(*[next(it) for _ in LayerWeights.FIELDS]) for i in range(cfg.n_layers)}
    final_norm, lm_head = next(it), next(it)
    return Weights(cfg, embedding, layers, final_norm, lm_head)


@dataclass
class HiddenStates:
    data: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=DTYPE)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.data.ndim != 2 or self.positions.shape != (self.data.shape[0],):
            raise InputError(
                f"hidden states {self.data.shape} do not match positions {self.positions.shape}"
            )

    @property
    def seq(self) -> int:
        return self.data.shape[0]


class KVCache:
    """Preallocated key/value storage for a contiguous range of layers.

    All layers share one ``length``. Entries beyond ``length`` are garbage.
    """

    def __init__(self, config: ModelConfig, layer_range: range):
        self.config = config
        self.layer_range = layer_range
        shape = (config.n_kv_heads, config.max_seq_len, config.head_dim)
        self.keys = {i: np.zeros(shape, DTYPE) for i in layer_range}
        self.values = {i: np.zeros(shape, DTYPE) for i in layer_range}
        self.length = 0

    def crop(self, pos: int) -> None:
        if not 0 <= pos <= self.length:
            raise ProtocolError(f"crop to {pos} outside cache length {self.length}", kind="state")
        self.length = pos

    def compact(self, start: int, keep: Sequence[int]) -> None:
        """Move entries ``start + keep[j]`` to ``start + j`` and truncate after them."""
        keep = list(keep)
        if start > self.length:
            raise ProtocolError("compaction start beyond cache length", kind="state")
        tail = self.length - start
        if any(b <= a for a, b in zip(keep, keep[1:])):
            raise ProtocolError(f"keep indices {keep} not strictly increasing", kind="state")
        if keep and (keep[0] < 0 or keep[-1] >= tail):
            raise ProtocolError(f"keep indices {keep} outside tail of length {tail}", kind="state")
        src = np.asarray(keep, dtype=np.int64) + start
        dst = slice(start, start + len(keep))
        for i in self.layer_range:
            self.keys[i][:, dst] = self.keys[i][:, src]
            self.values[i][:, dst] = self.values[i][:, src]
        self.length = start + len(keep)

    def nbytes(self) -> int:
        """Bytes actually in use (both keys and values, all layers)."""
        cfg = self.config
        return 2 * len(self.layer_range) * cfg.n_kv_heads * self.length * cfg.head_dim * 4


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + DTYPE(eps))) * gain


def _rope(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    # x: [heads, seq, head_dim]; rotate-half layout.
    half = x.shape[-1] // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(DTYPE)
    sin = np.sin(angles).astype(DTYPE)
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (DTYPE(1.0) + np.exp(-x))


def _attention(cfg: ModelConfig, lw: LayerWeights, x: np.ndarray, positions: np.ndarray,
               cache: KVCache, layer: int, mask: np.ndarray) -> np.ndarray:
    seq = x.shape[0]
    start = cache.length
    q = (x @ lw.wq).reshape(seq, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)
    k = (x @ lw.wk).reshape(seq, cfg.n_kv_heads, cfg.head_dim).transpose(1, 0, 2)
    v = (x @ lw.wv).reshape(seq, cfg.n_kv_heads, cfg.head_dim).transpose(1, 0, 2)
    q = _rope(q, positions, cfg.rope_base)
    k = _rope(k, positions, cfg.rope_base)
    cache.keys[layer][:, start:start + seq] = k
    cache.values[layer][:, start:start + seq] = v
    group = cfg.n_heads // cfg.n_kv_heads
    keys = np.repeat(cache.keys[layer][:, :start + seq], group, axis=0)
    values = np.repeat(cache.values[layer][:, :start + seq], group, axis=0)
    scores = (q @ keys.transpose(0, 2, 1)) * DTYPE(1.0 / math.sqrt(cfg.head_dim)) + mask
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs = probs / probs.sum(axis=-1, keepdims=True)
    out = (probs @ values).transpose(1, 0, 2).reshape(seq, cfg.n_heads * cfg.head_dim)
    return out @ lw.wo


def forward_layers(weights: Weights, layer_range: range, h: HiddenStates, cache: KVCache,
                   mask: np.ndarray | None = None) -> HiddenStates:
    """Run ``h`` through ``layer_range``, appending ``h.seq`` entries to ``cache``.

    ``mask`` is an additive ``[1, 1, seq, cache.length + seq]`` array of 0/-inf;
    ``None`` means the standard causal mask over the cached prefix.
    """
    cfg = weights.config
    if len(layer_range) == 0:
        return HiddenStates(h.data.copy(), h.positions.copy())
    if any(i not in cache.keys for i in layer_range):
        raise ProtocolError(f"cache does not hold layers {list(layer_range)}", kind="state")
    seq = h.seq
    if cache.length + seq > cfg.max_seq_len or (seq and int(h.positions.max()) >= cfg.max_seq_len):
        raise CapacityError(
            f"sequence of {cache.length + seq} exceeds max_seq_len {cfg.max_seq_len}"
        )
    if mask is None:
        mask = build_attention_mask(seq, cache.length) if seq else np.zeros((1, 1, 0, cache.length), DTYPE)
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.shape != (1, 1, seq, cache.length + seq):
        raise ProtocolError(
            f"mask shape {mask.shape} != (1, 1, {seq}, {cache.length + seq})", kind="shape"
        )
    x = h.data
    for i in layer_range:
        lw = weights.layers[i]
        x = x + _attention(cfg, lw, rms_norm(x, lw.attn_norm, cfg.rms_eps), h.positions,
                           cache, i, mask[0, 0])
        y = rms_norm(x, lw.ffn_norm, cfg.rms_eps)
        x = x + (_silu(y @ lw.w_gate) * (y @ lw.w_up)) @ lw.w_down
    cache.length += seq
    return HiddenStates(x, h.positions.copy())


def embed(weights: Weights, token_ids: Sequence[int], start_pos: int = 0,
          positions: Sequence[int] | None = None) -> HiddenStates:
    """Look up embedding rows. ``positions`` overrides the default contiguous run."""
    cfg = weights.config
    ids = np.asarray(list(token_ids), dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InputError(f"token id outside [0, {cfg.vocab_size})")
    if positions is None:
        if start_pos + len(ids) > cfg.max_seq_len:
            raise CapacityError(f"positions up to {start_pos + len(ids)} exceed max_seq_len")
        positions = np.arange(start_pos, start_pos + len(ids))
    return HiddenStates(weights.embedding[ids], positions)


def finalize(weights: Weights, h: HiddenStates) -> tuple[np.ndarray, np.ndarray]:
    """Final norm and LM head. Returns ``(logits [seq, vocab], greedy tokens)``."""
    if not np.all(np.isfinite(h.data)):
        raise NumericError("non-finite hidden state reached the LM head")
    logits = rms_norm(h.data, weights.final_norm, weights.config.rms_eps) @ weights.lm_head
    return logits, greedy(logits)


def greedy(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest index on ties.
    return np.argmax(logits, axis=-1)


def build_attention_mask(k: int, committed_len: int, max_seq_len: int | None = None) -> np.ndarray:
    """Causal mask for ``k`` new rows after ``committed_len`` cached entries.

    Row i is zero on columns ``0 .. committed_len + i`` and -inf after.
    """
    if k < 1:
        raise InputError("mask needs at least one query row")
    if committed_len < 0:
        raise InputError("committed_len must be non-negative")
    if max_seq_len is not None and committed_len + k > max_seq_len:
        raise CapacityError(f"{committed_len}+{k} exceeds max_seq_len {max_seq_len}")
    mask = np.full((1, 1, k, committed_len + k), NEG_INF, dtype=DTYPE)
    for i in range(k):
        mask[0, 0, i, :committed_len + i + 1] = 0.0
    return mask


def build_tree_mask(committed_len: int, branch_lengths: Sequence[int]) -> tuple[np.ndarray, list[int]]:
    """Mask for a root row followed by independent chains hanging off it.

    Row 0 is the root. Each chain's rows see the committed prefix, the root
    and their own chain's earlier rows, never another chain. Returns the mask
    and each row's depth below the root (its position offset).
    """
    depths = [0]
    for n in branch_lengths:
        depths.extend(range(1, n + 1))
    k = len(depths)
    mask = np.full((1, 1, k, committed_len + k), NEG_INF, dtype=DTYPE)
    mask[0, 0, :, :committed_len + 1] = 0.0
    row = 1
    for n in branch_lengths:
        for j in range(n):
            mask[0, 0, row + j, committed_len + row:committed_len + row + j + 1] = 0.0
        row += n
    return mask, depths


def generate_monolithic(weights: Weights, prompt: Sequence[int], max_new: int,
                        return_logits: bool = False):
    """Greedy generation through every layer with a single cache."""
    cfg = weights.config
    prompt = list(prompt)
    if not prompt:
        raise InputError("prompt must be non-empty")
    if len(prompt) + max_new > cfg.max_seq_len:
        raise CapacityError(f"prompt {len(prompt)} + max_new {max_new} exceeds max_seq_len")
    if max_new <= 0:
        return ([], np.zeros((0, cfg.vocab_size), DTYPE)) if return_logits else []
    everything = range(cfg.n_layers)
    cache = KVCache(cfg, everything)
    h = forward_layers(weights, everything, embed(weights, prompt), cache)
    logits, tokens = finalize(weights, HiddenStates(h.data[-1:], h.positions[-1:]))
    out, rows = [int(tokens[0])], [logits[0]]
    while len(out) < max_new:
        h = forward_layers(weights, everything, embed(weights, out[-1:], cache.length), cache)
        logits, tokens = finalize(weights, h)
        out.append(int(tokens[0]))
        rows.append(logits[0])
    if return_logits:
        return out, np.stack(rows)
    return out
