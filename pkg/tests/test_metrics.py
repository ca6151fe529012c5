import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splitf.client import SplitConfig
from splitf.errors import DecompositionError, InputError
from splitf.metrics import (ProjectionModel, break_even, cross_validate, decompose_fixed_overhead, load_corpus,
                            local_memory_bytes, make_corpora, project_throughput, rtt_sweep, rtt_to_compute_ratio,
                            run_ablation, save_corpus, self_ppl, verify_quality, write_table)

TIMING = {"tok_s", "mean_step_ms", "break_even"}


@pytest.mark.parametrize("wall,rtt,want", [(120.2, 77.4, 42.8), (124.7, 78.5, 46.2)])
def test_decompose_table_values(wall, rtt, want):
    assert decompose_fixed_overhead(wall, rtt) == pytest.approx(want, abs=1e-9)


def test_decompose_edges():
    assert decompose_fixed_overhead(50.0, 50.0) == 0.0
    with pytest.raises(DecompositionError):
        decompose_fixed_overhead(40.0, 41.0)


@pytest.mark.parametrize("acc,overhead,rtt,want", [(1.0, 42.9, 20, 15.9), (1.17, 42.9, 20, 18.6),
                                                    (1.0, 0.0, 100, 10.0)])
def test_projection_values(acc, overhead, rtt, want):
    assert project_throughput(ProjectionModel(overhead, acc), rtt) == pytest.approx(want, abs=0.05)


def test_projection_model_validation():
    with pytest.raises(DecompositionError):
        ProjectionModel(-1.0)
    with pytest.raises(DecompositionError):
        ProjectionModel(1.0, 0.9)
    with pytest.raises(InputError):
        project_throughput(ProjectionModel(1.0), -5)


@pytest.mark.parametrize("rtt,compute,want", [(78, 16, 4.9), (79, 21, 3.8), (33, 33, 1.0)])
def test_rtt_ratio(rtt, compute, want):
    assert rtt_to_compute_ratio(rtt, compute) == pytest.approx(want, abs=0.05)


def test_rtt_ratio_needs_positive_compute():
    with pytest.raises(InputError):
        rtt_to_compute_ratio(10, 0)


def test_cross_validate_at_fit_point_is_zero():
    model = ProjectionModel.fit(120.0, 80.0, 1.2)
    assert cross_validate(model, [(80.0, 1.2 / 0.120)]) == [pytest.approx(0.0, abs=1e-12)]
    with pytest.raises(InputError):
        cross_validate(model, [])


@given(wall=st.floats(1.0, 1000.0), frac=st.floats(0.0, 1.0), acc=st.floats(1.0, 8.0))
def test_projection_self_consistency(wall, frac, acc):
    rtt = wall * frac
    model = ProjectionModel.fit(wall, rtt, acc)
    assert model.project(rtt) == pytest.approx(acc / wall * 1000.0, rel=1e-12)


def test_break_even():
    assert break_even(30.0, 20.0) == 1.5


def test_self_ppl_of_certain_choices_is_one():
    logits = np.full((3, 5), -1e9)
    logits[np.arange(3), [1, 2, 3]] = 0.0
    assert self_ppl(logits, [1, 2, 3]) == pytest.approx(1.0)
    assert self_ppl(np.zeros((2, 4)), [0, 1]) == pytest.approx(4.0)


def test_corpora_shapes_and_round_trip(tmp_path):
    corpora = make_corpora(3, 10, seed=1)
    assert set(corpora) == {"repetitive", "random"}
    assert all(len(p) == 10 for ps in corpora.values() for p in ps)
    path = tmp_path / "c.txt"
    save_corpus(path, corpora["random"])
    assert load_corpus(path) == corpora["random"]
    path.write_text("# header\n1 2 3  # trailing\n\n4\n")
    assert load_corpus(path) == [[1, 2, 3], [4]]


def test_write_table(tmp_path):
    rows = [{"a": 1, "b": None}, {"a": 2, "c": "x"}]
    csv_path, json_path = write_table(rows, tmp_path / "out" / "t")
    assert csv_path.read_text().splitlines() == ["a,b,c", "1,,", "2,,x"]
    assert json.loads(json_path.read_text()) == rows


def _strip(rows):
    return [{k: v for k, v in r.items() if k not in TIMING} for r in rows]


def test_ablation_rows_and_determinism(weights):
    corpora = make_corpora(2, 12, seed=3)
    kwargs = dict(ngram_sizes=(3, 4), modes=("sequential", "jacobi", "lookahead"), max_new=20)
    a = run_ablation(weights, corpora, **kwargs)
    b = run_ablation(weights, corpora, **kwargs)
    assert _strip(a) == _strip(b)
    assert len(a) == 2 * 4
    for row in a:
        if row["mode"] == "sequential":
            assert row["acceptance"] == 1.0 and row["n"] is None
        assert row["acceptance"] >= 1.0
    with pytest.raises(InputError):
        run_ablation(weights, {})
    with pytest.raises(InputError):
        run_ablation(weights, {"x": []})


def test_rtt_sweep_rows_flag_lookahead(weights):
    prompts = make_corpora(1, 8)["repetitive"]
    rows = rtt_sweep(weights, prompts, rtts_ms=(4, 8), fit_rtt_ms=8, mode="lookahead", max_new=6, n_pings=3)
    assert [r["injected_rtt_ms"] for r in rows] == [4, 8]
    assert all(r["upper_bound"] for r in rows)
    assert rows[1]["rel_error"] == pytest.approx(0.0, abs=1e-9)


def test_verify_quality_report(weights):
    prompts = make_corpora(2, 8, seed=5)["random"]
    report = verify_quality(weights, prompts, max_new=16)
    assert report["all_identical"] and report["n_prompts"] == 2
    assert report["max_abs_logit_diff"] < 1e-3
    for entry in report["prompts"]:
        assert 0.0 <= entry["f16_match_fraction"] <= 1.0
        assert entry["self_ppl_sequential"] >= 1.0


def test_local_memory_accounting(weights):
    mem = local_memory_bytes(weights, SplitConfig(), context=100)
    cfg = weights.config
    assert mem["kv_cache"] == 2 * 4 * cfg.n_kv_heads * 100 * cfg.head_dim * 4
    assert mem["total"] == mem["embedding_and_head"] + mem["local_layers"] + mem["kv_cache"]
