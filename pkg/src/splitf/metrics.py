"""Latency decomposition, throughput projection and the bench harnesses.

Per-step wall time is modelled as ``rtt + fixed_overhead``. With an
acceptance rate ``a`` (tokens per round trip) the projected throughput at a
target RTT is ``a / ((target_rtt + fixed_overhead) / 1000)`` tokens/s.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .client import SplitConfig, connect
from .decoding import (DecodeResult, JacobiConfig, LookaheadConfig, decode_jacobi, decode_lookahead,
                       decode_sequential)
from .errors import DecompositionError, InputError
from .tinyformer import Weights, generate_monolithic


@dataclass
class ProjectionModel:
    fixed_overhead_ms: float
    acceptance_rate: float = 1.0

    def __post_init__(self):
        if self.fixed_overhead_ms < 0:
            raise DecompositionError("fixed overhead must be non-negative")
        if self.acceptance_rate < 1.0:
            raise DecompositionError("acceptance rate below 1 token per step")

    @classmethod
    def fit(cls, mean_step_ms: float, rtt_ms: float, acceptance_rate: float = 1.0) -> "ProjectionModel":
        return cls(decompose_fixed_overhead(mean_step_ms, rtt_ms), acceptance_rate)

    def project(self, target_rtt_ms: float) -> float:
        return project_throughput(self, target_rtt_ms)


def decompose_fixed_overhead(mean_step_ms: float, rtt_ms: float) -> float:
    """RTT-independent share of the per-step time."""
    if mean_step_ms < rtt_ms:
        raise DecompositionError(
            f"per-step wall {mean_step_ms:.3f}ms is below the measured RTT {rtt_ms:.3f}ms"
        )
    return mean_step_ms - rtt_ms


def project_throughput(model: ProjectionModel, target_rtt_ms: float) -> float:
    if target_rtt_ms < 0:
        raise InputError("target RTT must be non-negative")
    return model.acceptance_rate / ((target_rtt_ms + model.fixed_overhead_ms) / 1000.0)


def cross_validate(model: ProjectionModel, runs: Iterable[tuple[float, float]]) -> list[float]:
    """Relative error ``|projected - measured| / measured`` for each ``(rtt_ms, tok_s)``."""
    runs = list(runs)
    if not runs:
        raise InputError("cross-validation needs at least one measured run")
    return [abs(model.project(rtt) - tok_s) / tok_s for rtt, tok_s in runs]


def rtt_to_compute_ratio(rtt_ms: float, cloud_compute_ms: float) -> float:
    if cloud_compute_ms <= 0:
        raise InputError("cloud compute time must be positive")
    return rtt_ms / cloud_compute_ms


def break_even(per_step_lookahead_ms: float, per_step_sequential_ms: float) -> float:
    """Acceptance rate at which lookahead merely matches sequential throughput."""
    return per_step_lookahead_ms / per_step_sequential_ms


def self_ppl(logits: np.ndarray, tokens: Sequence[int]) -> float:
    """exp of the mean negative log-softmax probability of the chosen tokens."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    chosen = logp[np.arange(len(tokens)), np.asarray(tokens)]
    return float(math.exp(-chosen.mean()))


# -- corpora ---------------------------------------------------------------

def make_corpora(n_prompts: int = 8, prompt_len: int = 16, vocab_size: int = 256,
                 seed: int = 0) -> dict[str, list[list[int]]]:
    """Two synthetic prompt sets: short repeating motifs, and uniform tokens."""
    rng = np.random.default_rng(seed)
    repetitive, random = [], []
    for _ in range(n_prompts):
        motif = rng.integers(0, vocab_size, int(rng.integers(2, 5))).tolist()
        repetitive.append((motif * prompt_len)[:prompt_len])
        random.append(rng.integers(0, vocab_size, prompt_len).tolist())
    return {"repetitive": repetitive, "random": random}


def load_corpus(path: str | Path) -> list[list[int]]:
    """One prompt per line, whitespace separated token ids; '#' starts a comment."""
    prompts = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            prompts.append([int(t) for t in line.split()])
    return prompts


def save_corpus(path: str | Path, prompts: Sequence[Sequence[int]]) -> None:
    Path(path).write_text("".join(" ".join(map(str, p)) + "\n" for p in prompts))


def write_table(rows: Sequence[Mapping], stem: str | Path) -> tuple[Path, Path]:
    """Write ``stem.csv`` and ``stem.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    fields = list(dict.fromkeys(k for row in rows for k in row))
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row.get(k) is None else row.get(k) for k in fields})
    json_path.write_text(json.dumps(list(rows), indent=2) + "\n")
    return csv_path, json_path


# -- harnesses -------------------------------------------------------------

def run_mode(engine, mode: str, prompt, max_new: int, ngram_n: int = 3,
             lookahead: LookaheadConfig | None = None, jacobi: JacobiConfig | None = None,
             record_logits: bool = False) -> DecodeResult:
    if mode == "sequential":
        return decode_sequential(engine, prompt, max_new, record_logits)
    if mode == "jacobi":
        return decode_jacobi(engine, prompt, max_new, jacobi, record_logits)
    if mode == "lookahead":
        base = lookahead or LookaheadConfig()
        cfg = LookaheadConfig(ngram_n, max(base.window_w, ngram_n), base.max_candidates_g, base.pool_capacity)
        return decode_lookahead(engine, prompt, max_new, cfg, record_logits)
    raise InputError(f"unknown mode {mode!r}")


def _aggregate(results: Sequence[DecodeResult]) -> dict:
    tokens = sum(r.stats.tokens_committed for r in results)
    steps = sum(r.stats.steps for r in results)
    wall = sum(r.stats.wall_seconds for r in results)
    lookups = sum(r.stats.lookups for r in results)
    hits = sum(r.stats.pool_hits for r in results)
    return {
        "tokens": tokens,
        "steps": steps,
        "acceptance": tokens / steps,
        "match_rate": hits / lookups if lookups else None,
        "tok_s": tokens / wall if wall else 0.0,
        "mean_step_ms": 1000.0 * wall / steps,
    }


def run_ablation(weights: Weights, corpora: Mapping[str, Sequence[Sequence[int]]],
                 ngram_sizes: Sequence[int] = (3, 4, 5, 6, 7), modes: Sequence[str] = ("sequential", "lookahead"),
                 max_new: int = 100, endpoint: str = "sim:0", split: SplitConfig | None = None,
                 lookahead: LookaheadConfig | None = None, seed: int = 0) -> list[dict]:
    """One row per (corpus, mode, n). Sequential and Jacobi rows carry ``n = None``."""
    if not corpora:
        raise InputError("ablation needs at least one corpus")
    split = split or SplitConfig()
    rows = []
    for corpus, prompts in corpora.items():
        if not prompts:
            raise InputError(f"corpus {corpus!r} is empty")
        seq_step_ms = None
        for mode in modes:
            sizes = ngram_sizes if mode == "lookahead" else [None]
            for n in sizes:
                results = []
                for prompt in prompts:
                    client = connect(weights, split, endpoint, seed=seed)
                    try:
                        results.append(run_mode(client, mode, prompt, max_new, ngram_n=n or 3,
                                                lookahead=lookahead))
                    finally:
                        client.close()
                agg = _aggregate(results)
                if mode == "sequential":
                    seq_step_ms = agg["mean_step_ms"]
                rows.append({
                    "corpus": corpus,
                    "mode": mode,
                    "n": n,
                    "tok_s": round(agg["tok_s"], 4),
                    "acceptance": agg["acceptance"],
                    "match_rate": agg["match_rate"],
                    "tokens": agg["tokens"],
                    "steps": agg["steps"],
                    "mean_step_ms": round(agg["mean_step_ms"], 4),
                    "break_even": (round(break_even(agg["mean_step_ms"], seq_step_ms), 4)
                                   if seq_step_ms else None),
                })
    return rows


def rtt_sweep(weights: Weights, prompts: Sequence[Sequence[int]], rtts_ms: Sequence[float] = (20, 40, 80, 120),
              fit_rtt_ms: float = 80, mode: str = "sequential", max_new: int = 24,
              split: SplitConfig | None = None, n_pings: int = 20, seed: int = 0) -> list[dict]:
    """Measure at each injected RTT, fit overhead at ``fit_rtt_ms``, project the rest."""
    split = split or SplitConfig()
    measured = {}
    for rtt in sorted(set(rtts_ms) | {fit_rtt_ms}):
        client = connect(weights, split, f"sim:{rtt / 2}", seed=seed, rtt_pings=n_pings)
        try:
            results = [run_mode(client, mode, p, max_new) for p in prompts]
        finally:
            client.close()
        agg = _aggregate(results)
        measured[rtt] = {**agg, "rtt_measured_ms": client.rtt_ms}
    fit = measured[fit_rtt_ms]
    model = ProjectionModel.fit(fit["mean_step_ms"], fit["rtt_measured_ms"], fit["acceptance"])
    rows = []
    for rtt in rtts_ms:
        m = measured[rtt]
        projected = model.project(m["rtt_measured_ms"])
        rows.append({
            "mode": mode,
            "injected_rtt_ms": rtt,
            "rtt_measured_ms": round(m["rtt_measured_ms"], 4),
            "mean_step_ms": round(m["mean_step_ms"], 4),
            "acceptance": m["acceptance"],
            "measured_tok_s": m["tok_s"],
            "projected_tok_s": projected,
            "rel_error": abs(projected - m["tok_s"]) / m["tok_s"],
            "fixed_overhead_ms": round(model.fixed_overhead_ms, 4),
            "fit_rtt_ms": fit_rtt_ms,
            "upper_bound": mode != "sequential",
        })
    return rows


def verify_quality(weights: Weights, prompts: Sequence[Sequence[int]], max_new: int = 64,
                   split: SplitConfig | None = None, endpoint: str = "sim:0",
                   lookahead: LookaheadConfig | None = None, check_f16: bool = True) -> dict:
    """Sequential vs lookahead over the split pipeline, plus the monolithic oracle."""
    split = split or SplitConfig()
    per_prompt = []
    for prompt in prompts:
        reference = generate_monolithic(weights, prompt, max_new)
        runs = {}
        for mode in ("sequential", "lookahead"):
            client = connect(weights, split, endpoint)
            try:
                runs[mode] = run_mode(client, mode, prompt, max_new, lookahead=lookahead, record_logits=True)
            finally:
                client.close()
        seq, la = runs["sequential"], runs["lookahead"]
        entry = {
            "tokens_identical": seq.tokens == la.tokens,
            "matches_monolithic": seq.tokens == reference and la.tokens == reference,
            "max_abs_logit_diff": float(np.max(np.abs(seq.logits - la.logits))),
            "self_ppl_sequential": self_ppl(seq.logits, seq.tokens),
            "self_ppl_lookahead": self_ppl(la.logits, la.tokens),
            "lookahead_acceptance": la.stats.acceptance_rate,
        }
        if check_f16:
            half = SplitConfig(split.prefix_layers, split.suffix_layers, "f16")
            client = connect(weights, half, endpoint)
            try:
                f16 = run_mode(client, "sequential", prompt, max_new).tokens
            finally:
                client.close()
            entry["f16_match_fraction"] = float(np.mean([a == b for a, b in zip(f16, reference)]))
        per_prompt.append(entry)
    return {
        "dtype": split.dtype,
        "max_new": max_new,
        "n_prompts": len(per_prompt),
        "all_identical": all(p["tokens_identical"] and p["matches_monolithic"] for p in per_prompt),
        "max_abs_logit_diff": max(p["max_abs_logit_diff"] for p in per_prompt) if per_prompt else 0.0,
        "avg_self_ppl_sequential": float(np.mean([p["self_ppl_sequential"] for p in per_prompt])),
        "avg_self_ppl_lookahead": float(np.mean([p["self_ppl_lookahead"] for p in per_prompt])),
        "prompts": per_prompt,
    }


def local_memory_bytes(weights: Weights, split: SplitConfig, context: int) -> dict:
    """Parameter and KV-cache bytes held on the trusted side (float32)."""
    cfg = weights.config
    local = list(range(split.prefix_layers)) + list(range(cfg.n_layers - split.suffix_layers, cfg.n_layers))
    io = weights.embedding.nbytes + weights.lm_head.nbytes + weights.final_norm.nbytes
    layers = sum(a.nbytes for i in local for a in weights.layers[i].arrays())
    kv = 2 * len(local) * cfg.n_kv_heads * context * cfg.head_dim * 4
    return {"embedding_and_head": io, "local_layers": layers, "kv_cache": kv, "total": io + layers + kv}
