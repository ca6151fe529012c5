import numpy as np
import pytest

from splitf.errors import InputError, TrainingError
from splitf.inversion import (AttackDecoderConfig, attack_corpus, collect_activations, collect_samples,
                              depth_sweep, evaluate_attack, gradient_check, samples_to_arrays, top_k_accuracy,
                              train_attack_decoder, train_test_split)
from splitf.tinyformer import embed

SMALL = AttackDecoderConfig(hidden=(32, 32), epochs=20, batch_size=32)


@pytest.fixture(scope="module")
def tiny_data(tiny_weights):
    corpus = attack_corpus(tiny_weights, n_samples=320, seq_len=16, seed=1)
    return collect_activations(tiny_weights, corpus, 1)


def test_gradient_check():
    assert gradient_check() < 1e-4
    assert gradient_check(sizes=(3, 7, 2, 5), n=4, seed=9) < 1e-4


def test_depth_zero_is_embedding(weights):
    x, y = collect_activations(weights, [[3, 1, 4]], 0)
    np.testing.assert_array_equal(x, embed(weights, [3, 1, 4]).data.astype(np.float64))
    assert y.tolist() == [3, 1, 4]


def test_one_sample_per_position(weights):
    samples = collect_samples(weights, [list(range(10))], 2)
    assert len(samples) == 10 and all(s.depth == 2 for s in samples)
    x, y = samples_to_arrays(samples)
    assert x.shape == (10, weights.config.hidden_dim) and y.tolist() == list(range(10))


def test_depth_out_of_range(weights):
    with pytest.raises(InputError):
        collect_activations(weights, [[1, 2]], weights.config.n_layers + 1)
    with pytest.raises(InputError):
        depth_sweep(weights, [[1, 2]], [-1])


def test_single_class_rejected():
    with pytest.raises(TrainingError):
        train_attack_decoder(np.zeros((5, 3)), np.zeros(5, np.int64), 4)


def test_training_is_seeded_and_reduces_loss(tiny_data, tiny_weights):
    x, y = tiny_data
    vocab = tiny_weights.config.vocab_size
    a = train_attack_decoder(x, y, vocab, SMALL)
    b = train_attack_decoder(x, y, vocab, SMALL)
    for wa, wb in zip(a.w + a.b, b.w + b.b):
        np.testing.assert_array_equal(wa, wb)
    assert a.loss_curve[-1] < a.loss_curve[0]
    assert len(a.loss_curve) == SMALL.epochs + 1


def test_accuracy_ordering(tiny_data, tiny_weights):
    x, y = tiny_data
    train, test = train_test_split(len(y), 0.2, seed=0)
    decoder = train_attack_decoder(x[train], y[train], tiny_weights.config.vocab_size, SMALL)
    top1, top5 = evaluate_attack(decoder, x[test], y[test])
    train1, _ = evaluate_attack(decoder, x[train], y[train])
    assert top5 >= top1 and train1 >= top1


def test_untrained_decoder_near_chance(tiny_data, tiny_weights):
    x, y = tiny_data
    cfg = AttackDecoderConfig(hidden=(32, 32), epochs=0)
    decoder = train_attack_decoder(x, y, tiny_weights.config.vocab_size, cfg)
    top1, _ = evaluate_attack(decoder, x, y)
    assert top1 < 0.2


def test_top_k_ties_go_to_lowest_index():
    logits = np.zeros((2, 4))
    assert top_k_accuracy(logits, np.array([0, 1]), 1) == 0.5
    assert top_k_accuracy(logits, np.array([3, 3]), 4) == 1.0


def test_split_partitions_indices():
    train, test = train_test_split(50, 0.2, seed=2)
    assert len(test) == 10 and sorted(np.concatenate([train, test]).tolist()) == list(range(50))


def test_attack_corpus_shape(tiny_weights):
    corpus = attack_corpus(tiny_weights, n_samples=100, seq_len=10, seed=0)
    assert len(corpus) == 10 and all(len(s) == 10 for s in corpus)
    assert attack_corpus(tiny_weights, 100, 10, 0) == corpus


def test_depth_sweep_report(tiny_weights):
    corpus = attack_corpus(tiny_weights, n_samples=192, seq_len=16, seed=0)
    report = depth_sweep(tiny_weights, corpus, [0, 2], SMALL)
    row = report.by_depth(2)
    assert row["n_train"] + row["n_test"] == 192 and row["n_test"] == 38
    assert report.random_top1 == 1 / 32
    assert report.to_dict()["rows"] == report.rows
    assert report.by_depth(0)["top1_accuracy"] >= report.random_top1
    with pytest.raises(KeyError):
        report.by_depth(5)
