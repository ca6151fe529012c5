"""Sequential, Jacobi and lookahead decoding over a batch engine.

Every strategy keeps one *pending* token: already chosen by greedy argmax
but not yet pushed through the model. A step sends the pending token,
followed by guessed continuations, in one batch. Row 0's argmax is the next
token for sure; each guess that matches the argmax of the row before it is
accepted, and the first mismatch (or the last row) supplies a bonus token.
So every step commits at least one token and the stream always equals
plain greedy decoding, whatever the guesses were.

Lookahead guesses come from two places in the same batch: a Jacobi window
(a chain fed back from the previous step's outputs) and up to ``g`` n-gram
continuations from a pool keyed by the pending token. Chains hang off the
pending row and never see each other (see ``build_tree_mask``).
"""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError
from .tinyformer import build_tree_mask, greedy


@dataclass(frozen=True)
class JacobiConfig:
    block_k: int = 4
    max_iters_per_block: int = 0  # 0: no limit besides max_new
    init_policy: str = "repeat_last"

    def __post_init__(self):
        if self.block_k < 1:
            raise ConfigError("block_k must be at least 1")
        if self.init_policy not in ("repeat_last", "pool_sample"):
            raise ConfigError(f"unknown init_policy {self.init_policy!r}")


@dataclass(frozen=True)
class LookaheadConfig:
    ngram_n: int = 3
    window_w: int = 8
    max_candidates_g: int = 2
    pool_capacity: int = 4096

    def __post_init__(self):
        if self.ngram_n < 2:
            raise ConfigError("ngram_n must be at least 2")
        if self.window_w < self.ngram_n:
            raise ConfigError("window_w must be at least ngram_n")
        if self.max_candidates_g < 0 or self.pool_capacity < 1:
            raise ConfigError("max_candidates_g must be >= 0 and pool_capacity >= 1")


class NGramPool:
    """Continuations of length ``n - 1`` keyed by a leading token.

    Capacity counts (key, continuation) entries; re-inserting an entry makes
    it the most recent. Eviction drops the globally oldest entry.
    """

    def __init__(self, n: int = 3, capacity: int = 4096):
        self.n = n
        self.capacity = capacity
        self._order: OrderedDict[tuple[int, tuple[int, ...]], None] = OrderedDict()
        self._by_key: dict[int, OrderedDict[tuple[int, ...], None]] = {}

    def __len__(self) -> int:
        return len(self._order)

    def insert(self, key: int, continuation: Sequence[int]) -> None:
        cont = tuple(int(t) for t in continuation)
        if len(cont) != self.n - 1:
            return
        entry = (int(key), cont)
        bucket = self._by_key.setdefault(entry[0], OrderedDict())
        if entry in self._order:
            self._order.move_to_end(entry)
            bucket.move_to_end(cont)
            return
        self._order[entry] = None
        bucket[cont] = None
        while len(self._order) > self.capacity:
            (old_key, old_cont), _ = self._order.popitem(last=False)
            old_bucket = self._by_key[old_key]
            del old_bucket[old_cont]
            if not old_bucket:
                del self._by_key[old_key]

    def update(self, previous: Sequence[int], current: Sequence[int]) -> None:
        """Harvest n-grams from two consecutive window trajectories.

        Both lists are position aligned. For each slot i the key is
        ``previous[i]`` and the continuation ``current[i+1 : i+n]``; slots
        too close to the window edge are skipped.
        """
        span = self.n - 1
        for i in range(len(previous)):
            if i + span < len(current):
                self.insert(previous[i], current[i + 1:i + 1 + span])

    def lookup(self, key: int, g: int) -> list[tuple[int, ...]]:
        bucket = self._by_key.get(int(key))
        if not bucket or g <= 0:
            return []
        return list(reversed(bucket))[:g]

    def entries(self):
        return list(self._order)


def ngram_update(pool: NGramPool, previous: Sequence[int], current: Sequence[int]) -> None:
    pool.update(previous, current)


def ngram_lookup(pool: NGramPool, key: int, g: int) -> list[tuple[int, ...]]:
    return pool.lookup(key, g)


@dataclass
class DecodeStats:
    tokens_committed: int = 0
    steps: int = 0
    pool_hits: int = 0
    lookups: int = 0
    wall_seconds: float = 0.0
    step_log: list[dict] = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        return self.tokens_committed / self.steps if self.steps else 0.0

    @property
    def match_rate(self) -> float | None:
        return self.pool_hits / self.lookups if self.lookups else None

    @property
    def tokens_per_second(self) -> float:
        return self.tokens_committed / self.wall_seconds if self.wall_seconds else 0.0

    def mean_step_ms(self) -> float:
        walls = [row["wall_ms"] for row in self.step_log]
        return float(np.mean(walls)) if walls else 0.0

    def summary(self) -> dict:
        return {
            "tokens": self.tokens_committed,
            "steps": self.steps,
            "acceptance_rate": self.acceptance_rate,
            "match_rate": self.match_rate,
            "wall_seconds": self.wall_seconds,
            "tok_s": self.tokens_per_second,
        }


@dataclass
class DecodeResult:
    tokens: list[int]
    stats: DecodeStats
    logits: np.ndarray | None = None


def verify_greedy(logits: np.ndarray, guesses: Sequence[int]) -> tuple[int, list[int]]:
    """Longest accepted prefix of ``guesses`` and the tokens it commits.

    ``logits`` has ``len(guesses) + 1`` rows: row 0 is the prediction after
    the pending token, row j the prediction after ``guesses[:j]``. Returns
    ``(accepted, new_tokens)`` with ``new_tokens = guesses[:accepted] +
    [argmax of row accepted]``.
    """
    argmax = greedy(np.asarray(logits))
    if len(argmax) < len(guesses) + 1:
        raise InputError("need one logits row per guess plus the pending row")
    accepted = 0
    while accepted < len(guesses) and int(guesses[accepted]) == int(argmax[accepted]):
        accepted += 1
    return accepted, [int(t) for t in argmax[:accepted + 1]]


class _Run:
    """Shared bookkeeping for one generation."""

    def __init__(self, engine, prompt, max_new, record_logits):
        prompt = list(prompt)
        if not prompt:
            raise InputError("prompt must be non-empty")
        if max_new < 0:
            raise InputError("max_new must be non-negative")
        if len(prompt) + max_new > engine.max_seq_len:
            raise InputError(f"prompt {len(prompt)} + max_new {max_new} exceeds max_seq_len")
        self.engine = engine
        self.max_new = max_new
        self.tokens: list[int] = []
        self.rows: list[np.ndarray] = []
        self.record_logits = record_logits
        self.stats = DecodeStats()
        self.t0 = time.perf_counter()
        self.prompt = prompt

    @property
    def remaining(self) -> int:
        return self.max_new - len(self.tokens)

    def prefill(self) -> int:
        row = self.engine.prefill(self.prompt)
        token = int(greedy(row[None])[0])
        self.commit([token], row[None], batch_len=len(self.prompt), accepted=0, pool_hit=None)
        return token

    def commit(self, new, rows, batch_len, accepted, pool_hit) -> None:
        new = list(new)[:self.remaining]
        self.tokens.extend(new)
        if self.record_logits:
            self.rows.extend(np.asarray(rows)[:len(new)])
        t = self.engine.last_timing
        self.stats.steps += 1
        self.stats.tokens_committed += len(new)
        if pool_hit is not None:
            self.stats.lookups += 1
            self.stats.pool_hits += int(pool_hit)
        self.stats.step_log.append({
            "step": self.stats.steps - 1,
            "batch_len": batch_len,
            "accepted": len(new),
            "pool_hit": pool_hit,
            "wall_ms": t.wall_ms if t else 0.0,
            "payload_bytes_up": t.bytes_up if t else 0,
            "payload_bytes_down": t.bytes_down if t else 0,
            "srv_ms": t.remote_reported_ms if t else 0.0,
        })

    def result(self) -> DecodeResult:
        self.stats.wall_seconds = time.perf_counter() - self.t0
        logits = np.stack(self.rows) if self.record_logits and self.rows else None
        return DecodeResult(self.tokens, self.stats, logits)


def _room(engine) -> int:
    """Cache slots left for a batch that starts with the pending token."""
    return engine.max_seq_len - engine.committed_len


def decode_sequential(engine, prompt: Sequence[int], max_new: int,
                      record_logits: bool = False) -> DecodeResult:
    run = _Run(engine, prompt, max_new, record_logits)
    if max_new == 0:
        return run.result()
    pending = run.prefill()
    while run.remaining > 0:
        pos = engine.committed_len
        logits = engine.run_batch([pending], [pos])
        engine.resolve(None)
        pending = int(greedy(logits)[0])
        run.commit([pending], logits, batch_len=1, accepted=1, pool_hit=None)
    return run.result()


def _speculative_step(run: _Run, pending: int, branches: list[list[int]]):
    """Send ``pending`` plus chain ``branches``; commit the best branch.

    Ties go to the earliest branch. Returns the committed tokens, their
    logits rows, the argmax of every row, each branch's row indices (row 0
    first), the winning branch and the batch length.
    """
    engine = run.engine
    pos = engine.committed_len
    mask, depths = build_tree_mask(pos, [len(b) for b in branches])
    batch = [pending] + [t for b in branches for t in b]
    logits = engine.run_batch(batch, [pos + d for d in depths], mask)
    argmax = greedy(logits)
    best = (-1, 0, [])
    offsets, row = [], 1
    for b_idx, branch in enumerate(branches):
        rows = [0] + list(range(row, row + len(branch)))
        offsets.append(rows)
        accepted, new = verify_greedy(logits[rows], branch)
        if accepted > best[0]:
            best = (accepted, b_idx, new)
        row += len(branch)
    accepted, winner, new = best
    keep = offsets[winner][:accepted + 1]
    engine.resolve(keep)
    return new, logits[keep], argmax, offsets, winner, len(batch)


def decode_jacobi(engine, prompt: Sequence[int], max_new: int, cfg: JacobiConfig | None = None,
                  record_logits: bool = False) -> DecodeResult:
    cfg = cfg or JacobiConfig()
    run = _Run(engine, prompt, max_new, record_logits)
    if max_new == 0:
        return run.result()
    pending = run.prefill()
    pool = NGramPool(2, 4096) if cfg.init_policy == "pool_sample" else None
    guesses: list[int] = []
    while run.remaining > 0:
        width = max(0, min(cfg.block_k - 1, _room(engine) - 1, run.remaining - 1))
        guesses = _pad(guesses[:width], width, pending, pool)
        new, rows, argmax, offsets, _, batch_len = _speculative_step(run, pending, [guesses])
        outputs = [int(argmax[r]) for r in offsets[0]]
        if pool is not None:
            pool.update(guesses, outputs[:len(guesses)])
        guesses = outputs[len(new):]
        pending = new[-1]
        run.commit(new, rows, batch_len=batch_len, accepted=len(new), pool_hit=None)
    return run.result()


def _pad(guesses: list[int], width: int, pending: int, pool: NGramPool | None) -> list[int]:
    out = list(guesses)
    while len(out) < width:
        last = out[-1] if out else pending
        follow = pool.lookup(last, 1) if pool is not None else []
        out.append(follow[0][0] if follow else last)
    return out


def decode_lookahead(engine, prompt: Sequence[int], max_new: int, cfg: LookaheadConfig | None = None,
                     record_logits: bool = False, pool: NGramPool | None = None) -> DecodeResult:
    cfg = cfg or LookaheadConfig()
    run = _Run(engine, prompt, max_new, record_logits)
    if max_new == 0:
        return run.result()
    pool = pool if pool is not None else NGramPool(cfg.ngram_n, cfg.pool_capacity)
    pending = run.prefill()
    window: list[int] = []
    while run.remaining > 0:
        budget = _room(engine) - 1
        width = max(0, min(cfg.window_w, budget))
        window = _pad(window[:width], width, pending, None)
        budget -= width
        candidates = []
        for cont in pool.lookup(pending, cfg.max_candidates_g):
            cont = list(cont)[:budget]
            if cont:
                candidates.append(cont)
                budget -= len(cont)
        branches = [window] + candidates
        new, rows, argmax, offsets, _, batch_len = _speculative_step(run, pending, branches)
        # outputs[i] is the prediction for the slot window[i] occupies
        outputs = [int(argmax[r]) for r in offsets[0]]
        pool.update(window, outputs[:len(window)])
        window = outputs[len(new):]
        pending = new[-1]
        run.commit(new, rows, batch_len=batch_len, accepted=len(new), pool_hit=bool(candidates))
    return run.result()


def jacobi_nominal_throughput(k: int, iterations: int, rtt_s: float) -> float:
    """Tokens per second when ``k`` tokens converge in ``iterations`` round trips."""
    return k / (iterations * rtt_s)


STRATEGIES = {
    "sequential": decode_sequential,
    "jacobi": decode_jacobi,
    "lookahead": decode_lookahead,
}
