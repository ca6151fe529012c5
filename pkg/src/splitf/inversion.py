"""Token-recovery attack on split-boundary activations.

The attacker sees the hidden state leaving the last local prefix layer and
trains a position-independent MLP (two ReLU hidden layers, softmax output)
to predict the input token at that position. Forward and backward passes
are written out by hand; ``gradient_check`` compares them with central
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError, TrainingError
from .tinyformer import KVCache, Weights, embed, forward_layers, generate_monolithic


@dataclass
class ActivationSample:
    activation: np.ndarray
    token_id: int
    depth: int


@dataclass(frozen=True)
class AttackDecoderConfig:
    hidden: tuple[int, int] | None = None  # None: (4*hidden_dim, 4*hidden_dim)
    learning_rate: float = 0.1
    epochs: int = 150
    batch_size: int = 64
    seed: int = 0


@dataclass
class AttackDecoder:
    """MLP parameters plus the input standardization fitted on training data."""

    w: list[np.ndarray]
    b: list[np.ndarray]
    mean: np.ndarray
    scale: np.ndarray
    loss_curve: list[float] = field(default_factory=list)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return _forward(self.w, self.b, (x - self.mean) / self.scale)[0][-1]


def collect_activations(weights: Weights, corpus: Sequence[Sequence[int]], depth: int) -> tuple[np.ndarray, np.ndarray]:
    """Hidden state after the first ``depth`` layers for every corpus position.

    ``depth = 0`` gives raw embeddings. Returns ``(activations [N, d], tokens [N])``
    in corpus order.
    """
    cfg = weights.config
    if not 0 <= depth <= cfg.n_layers:
        raise InputError(f"depth {depth} outside 0..{cfg.n_layers}")
    xs, ys = [], []
    layers = range(depth)
    for seq in corpus:
        seq = list(seq)
        if not seq:
            continue
        h = forward_layers(weights, layers, embed(weights, seq), KVCache(cfg, layers))
        xs.append(h.data.astype(np.float64))
        ys.extend(seq)
    return np.concatenate(xs), np.asarray(ys, dtype=np.int64)


def collect_samples(weights: Weights, corpus, depth: int) -> list[ActivationSample]:
    x, y = collect_activations(weights, corpus, depth)
    return [ActivationSample(a, int(t), depth) for a, t in zip(x, y)]


def attack_corpus(weights: Weights, n_samples: int = 1280, seq_len: int = 16, seed: int = 0) -> list[list[int]]:
    """Half model-generated continuations, half uniform-random sequences."""
    cfg = weights.config
    rng = np.random.default_rng(seed)
    n_seqs = max(2, -(-n_samples // seq_len))
    corpus = []
    for i in range(n_seqs):
        if i % 2 == 0:
            prompt = rng.integers(0, cfg.vocab_size, 4).tolist()
            corpus.append(prompt + generate_monolithic(weights, prompt, seq_len - 4))
        else:
            corpus.append(rng.integers(0, cfg.vocab_size, seq_len).tolist())
    return corpus


def _init(sizes: Sequence[int], rng: np.random.Generator):
    w, b = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        w.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        b.append(np.zeros(fan_out))
    return w, b


def _forward(w, b, x):
    acts, pre = [x], []
    for i, (wi, bi) in enumerate(zip(w, b)):
        z = acts[-1] @ wi + bi
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if i < len(w) - 1 else z)
    return acts, pre


def loss_and_grads(w, b, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradients with respect to every weight and bias."""
    acts, pre = _forward(w, b, x)
    logits = acts[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    n = x.shape[0]
    loss = float(-np.mean(np.log(probs[np.arange(n), y])))
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw, gb = [None] * len(w), [None] * len(b)
    for i in reversed(range(len(w))):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ w[i].T) * (pre[i - 1] > 0)
    return loss, gw, gb


def gradient_check(sizes: Sequence[int] = (6, 5, 5, 4), n: int = 7, eps: float = 1e-6, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients (float64)."""
    rng = np.random.default_rng(seed)
    w, b = _init(sizes, rng)
    for bi in b:
        bi += rng.normal(0, 0.1, bi.shape)
    x = rng.normal(size=(n, sizes[0]))
    y = rng.integers(0, sizes[-1], n)
    _, gw, gb = loss_and_grads(w, b, x, y)
    worst = 0.0
    for params, grads in ((w, gw), (b, gb)):
        for p, g in zip(params, grads):
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = p[idx]
                p[idx] = orig + eps
                up = loss_and_grads(w, b, x, y)[0]
                p[idx] = orig - eps
                down = loss_and_grads(w, b, x, y)[0]
                p[idx] = orig
                numeric = (up - down) / (2 * eps)
                denom = max(abs(numeric), abs(g[idx]), 1e-8)
                worst = max(worst, abs(numeric - g[idx]) / denom)
    return worst


def train_attack_decoder(x: np.ndarray, y: np.ndarray, vocab_size: int,
                         cfg: AttackDecoderConfig | None = None) -> AttackDecoder:
    cfg = cfg or AttackDecoderConfig()
    if len(np.unique(y)) < 2:
        raise TrainingError("training data needs at least two distinct tokens")
    d = x.shape[1]
    hidden = cfg.hidden or (4 * d, 4 * d)
    rng = np.random.default_rng(cfg.seed)
    mean = x.mean(axis=0)
    scale = x.std(axis=0) + 1e-8
    xs = (x - mean) / scale
    w, b = _init((d, *hidden, vocab_size), rng)
    curve = [loss_and_grads(w, b, xs, y)[0]]
    for _ in range(cfg.epochs):
        order = rng.permutation(len(xs))
        for start in range(0, len(xs), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, gw, gb = loss_and_grads(w, b, xs[idx], y[idx])
            for i in range(len(w)):
                w[i] -= cfg.learning_rate * gw[i]
                b[i] -= cfg.learning_rate * gb[i]
        curve.append(loss_and_grads(w, b, xs, y)[0])
    return AttackDecoder(w, b, mean, scale, curve)


def top_k_accuracy(logits: np.ndarray, y: np.ndarray, k: int) -> float:
    # stable sort on the negated logits keeps the lower index first among ties
    ranked = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(ranked == y[:, None], axis=1)))


def evaluate_attack(decoder: AttackDecoder, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    logits = decoder.logits(x)
    return top_k_accuracy(logits, y, 1), top_k_accuracy(logits, y, 5)


def train_test_split(n: int, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return order[n_test:], order[:n_test]


@dataclass
class AttackReport:
    vocab_size: int
    rows: list[dict]

    @property
    def random_top1(self) -> float:
        return 1.0 / self.vocab_size

    @property
    def random_top5(self) -> float:
        return 5.0 / self.vocab_size

    def by_depth(self, depth: int) -> dict:
        for row in self.rows:
            if row["depth"] == depth:
                return row
        raise KeyError(depth)

    def to_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "random_top1": self.random_top1,
                "random_top5": self.random_top5, "rows": self.rows}


def samples_to_arrays(samples: Sequence[ActivationSample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.activation for s in samples]),
            np.asarray([s.token_id for s in samples], dtype=np.int64))


def depth_sweep(weights: Weights, corpus: Sequence[Sequence[int]], depths: Sequence[int],
                cfg: AttackDecoderConfig | None = None, seed: int = 0) -> AttackReport:
    """Collect, train and evaluate at each depth on one fixed 80/20 split."""
    cfg = cfg or AttackDecoderConfig(seed=seed)
    vocab = weights.config.vocab_size
    for depth in depths:
        if not 0 <= depth <= weights.config.n_layers:
            raise InputError(f"depth {depth} outside 0..{weights.config.n_layers}")
    rows = []
    split = None
    for depth in depths:
        x, y = collect_activations(weights, corpus, depth)
        if split is None:
            split = train_test_split(len(y), 0.2, seed)
        train, test = split
        decoder = train_attack_decoder(x[train], y[train], vocab, cfg)
        top1, top5 = evaluate_attack(decoder, x[test], y[test])
        train1, _ = evaluate_attack(decoder, x[train], y[train])
        rows.append({
            "depth": depth,
            "top1_accuracy": top1,
            "top5_accuracy": top5,
            "train_top1_accuracy": train1,
            "n_train": int(len(train)),
            "n_test": int(len(test)),
            "initial_loss": decoder.loss_curve[0],
            "final_loss": decoder.loss_curve[-1],
        })
    return AttackReport(vocab, rows)
