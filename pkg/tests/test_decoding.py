import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitf.client import LocalEngine, SplitConfig, connect
from splitf.decoding import (JacobiConfig, LookaheadConfig, NGramPool, decode_jacobi, decode_lookahead,
                             decode_sequential, jacobi_nominal_throughput, ngram_lookup, ngram_update,
                             verify_greedy)
from splitf.errors import ConfigError, InputError
from splitf.tinyformer import generate_monolithic


def rand_prompt(seed, n=8, vocab=256):
    return np.random.default_rng(seed).integers(0, vocab, n).tolist()


def periodic_prompt(seed, n=16):
    rng = np.random.default_rng(seed)
    motif = rng.integers(0, 256, 3).tolist()
    return (motif * n)[:n]


def one_hot_rows(tokens, vocab=8):
    rows = np.zeros((len(tokens), vocab))
    rows[np.arange(len(tokens)), tokens] = 1.0
    return rows


# -- verify_greedy -------------------------------------------------------------

def test_verify_all_wrong():
    logits = one_hot_rows([3, 4, 5])
    assert verify_greedy(logits, [0, 0]) == (0, [3])


def test_verify_all_right_gets_bonus():
    logits = one_hot_rows([3, 4, 5])
    assert verify_greedy(logits, [3, 4]) == (2, [3, 4, 5])


def test_verify_needs_enough_rows():
    with pytest.raises(InputError):
        verify_greedy(one_hot_rows([1]), [1, 2])


@given(st.lists(st.integers(0, 7), min_size=1, max_size=8), st.data())
def test_verify_commits_argmax_prefix(argmax, data):
    guesses = data.draw(st.lists(st.integers(0, 7), min_size=len(argmax) - 1, max_size=len(argmax) - 1))
    accepted, new = verify_greedy(one_hot_rows(argmax), guesses)
    assert new == argmax[:accepted + 1]
    assert guesses[:accepted] == argmax[:accepted]
    assert accepted == len(guesses) or guesses[accepted] != argmax[accepted]


# -- n-gram pool ---------------------------------------------------------------

def test_pool_learns_repeated_sequence():
    pool = NGramPool(3)
    seq = [5, 6, 7, 8]
    ngram_update(pool, seq, seq)
    ngram_update(pool, seq, seq)
    assert ngram_lookup(pool, 5, 2) == [(6, 7)]


def test_pool_unseen_and_recency():
    pool = NGramPool(3)
    assert pool.lookup(1, 2) == []
    pool.insert(1, (2, 3))
    pool.insert(1, (4, 5))
    assert pool.lookup(1, 1) == [(4, 5)]
    pool.insert(1, (2, 3))
    assert pool.lookup(1, 2) == [(2, 3), (4, 5)]


def test_pool_eviction_is_oldest_first():
    pool = NGramPool(2, capacity=2)
    pool.insert(1, (2,))
    pool.insert(3, (4,))
    pool.insert(5, (6,))
    assert len(pool) == 2 and pool.lookup(1, 1) == [] and pool.lookup(5, 1) == [(6,)]


def test_pool_skips_short_continuations():
    pool = NGramPool(4)
    pool.update([1, 2, 3], [9, 8, 7])
    assert len(pool) == 0
    pool.insert(1, (2,))
    assert len(pool) == 0


# -- configs ---------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        JacobiConfig(block_k=0)
    with pytest.raises(ConfigError):
        LookaheadConfig(ngram_n=1)
    with pytest.raises(ConfigError):
        LookaheadConfig(ngram_n=5, window_w=4)


def test_jacobi_nominal_formula():
    assert jacobi_nominal_throughput(5, 2, 0.1) == pytest.approx(25.0)


# -- greedy identity -----------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_sequential_matches_monolithic(weights, seed):
    prompt = rand_prompt(seed)
    result = decode_sequential(LocalEngine(weights), prompt, 24)
    assert result.tokens == generate_monolithic(weights, prompt, 24)
    assert result.stats.acceptance_rate == 1.0
    assert result.stats.steps == 24


@pytest.mark.parametrize("block_k", [1, 2, 4, 7])
@pytest.mark.parametrize("policy", ["repeat_last", "pool_sample"])
def test_jacobi_matches_monolithic(weights, block_k, policy):
    prompt = rand_prompt(block_k)
    result = decode_jacobi(LocalEngine(weights), prompt, 30, JacobiConfig(block_k=block_k, init_policy=policy))
    assert result.tokens == generate_monolithic(weights, prompt, 30)
    assert result.stats.steps <= 30


def test_jacobi_block_one_is_sequential(weights):
    prompt = rand_prompt(9)
    result = decode_jacobi(LocalEngine(weights), prompt, 12, JacobiConfig(block_k=1))
    assert result.stats.acceptance_rate == 1.0


@pytest.mark.parametrize("cfg", [LookaheadConfig(), LookaheadConfig(5, 8, 2), LookaheadConfig(2, 2, 0),
                                 LookaheadConfig(7, 7, 3, 16)])
@pytest.mark.parametrize("periodic", [False, True])
def test_lookahead_matches_monolithic(weights, cfg, periodic):
    prompt = periodic_prompt(cfg.ngram_n) if periodic else rand_prompt(cfg.ngram_n)
    result = decode_lookahead(LocalEngine(weights), prompt, 40, cfg)
    assert result.tokens == generate_monolithic(weights, prompt, 40)
    assert result.stats.acceptance_rate >= 1.0
    assert result.stats.steps <= 40


@pytest.mark.parametrize("mode", ["sequential", "jacobi", "lookahead"])
def test_split_strategies_match_monolithic(weights, mode):
    prompt = rand_prompt(42)
    client = connect(weights, SplitConfig(), "sim:0")
    fn = {"sequential": decode_sequential, "jacobi": decode_jacobi, "lookahead": decode_lookahead}[mode]
    assert fn(client, prompt, 32).tokens == generate_monolithic(weights, prompt, 32)


def test_lookahead_gains_on_periodic_prompt(weights):
    result = decode_lookahead(LocalEngine(weights), periodic_prompt(1), 48)
    assert result.stats.acceptance_rate > 1.0


@pytest.mark.parametrize("n,hi", [(3, 13), (5, 17)])
def test_lookahead_batch_sizes(weights, n, hi):
    result = decode_lookahead(LocalEngine(weights), periodic_prompt(3), 60, LookaheadConfig(n, 8, 2))
    sizes = [row["batch_len"] for row in result.stats.step_log[1:]]
    assert min(sizes) >= 9 and max(sizes) <= hi


def test_adversarial_pool_never_changes_output(weights):
    rng = np.random.default_rng(0)
    pool = NGramPool(3, 100000)
    for key in range(256):
        for _ in range(3):
            pool.insert(key, tuple(rng.integers(0, 256, 2).tolist()))
    prompt = rand_prompt(5)
    result = decode_lookahead(LocalEngine(weights), prompt, 40, pool=pool)
    assert result.tokens == generate_monolithic(weights, prompt, 40)
    assert result.stats.match_rate == 1.0


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), max_new=st.integers(1, 30), n=st.integers(2, 5))
def test_lookahead_identity_property(weights, seed, max_new, n):
    prompt = rand_prompt(seed, n=int(seed % 12) + 1)
    result = decode_lookahead(LocalEngine(weights), prompt, max_new, LookaheadConfig(n, 8, 2))
    assert result.tokens == generate_monolithic(weights, prompt, max_new)


def test_accounting_and_match_rate_from_step_log(weights):
    result = decode_lookahead(LocalEngine(weights), periodic_prompt(7), 50)
    log = result.stats.step_log
    assert sum(r["accepted"] for r in log) == result.stats.tokens_committed == len(result.tokens)
    assert result.stats.acceptance_rate == result.stats.tokens_committed / result.stats.steps
    lookups = [r["pool_hit"] for r in log if r["pool_hit"] is not None]
    assert result.stats.match_rate == sum(lookups) / len(lookups)
    assert log[0]["pool_hit"] is None
    assert all(r["accepted"] >= 1 for r in log)


class RecordingPool(NGramPool):
    def __init__(self, *args):
        super().__init__(*args)
        self.seen = []

    def update(self, previous, current):
        self.seen.append((list(previous), list(current)))
        super().update(previous, current)


def test_pool_soundness(weights):
    pool = RecordingPool(3, 4096)
    decode_lookahead(LocalEngine(weights), periodic_prompt(11), 40, pool=pool)
    observed = set()
    for prev, cur in pool.seen:
        for i in range(len(prev)):
            if i + 2 < len(cur):
                observed.add((prev[i], tuple(cur[i + 1:i + 3])))
    assert pool.entries() and set(pool.entries()) <= observed


def test_stops_at_max_seq_len(tiny_weights):
    cfg = tiny_weights.config
    prompt = [1] * (cfg.max_seq_len - 10)
    for fn in (decode_sequential, decode_jacobi, decode_lookahead):
        result = fn(LocalEngine(tiny_weights), prompt, 10)
        assert result.tokens == generate_monolithic(tiny_weights, prompt, 10)


def test_rejects_impossible_requests(weights):
    with pytest.raises(InputError):
        decode_sequential(LocalEngine(weights), [], 5)
    with pytest.raises(InputError):
        decode_lookahead(LocalEngine(weights), [1] * 250, 10)
    assert decode_jacobi(LocalEngine(weights), [1], 0).tokens == []


def test_record_logits_rows_match_tokens(weights):
    result = decode_lookahead(LocalEngine(weights), periodic_prompt(2), 20, record_logits=True)
    assert result.logits.shape == (20, 256)
    assert list(np.argmax(result.logits, axis=1)) == result.tokens
