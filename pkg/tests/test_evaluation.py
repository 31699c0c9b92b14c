import logging
import math

import numpy as np
import pytest
import torch

from beam_search import QueryEngine
from conftest import make_kg, trained_lp
from errors import ContractViolationError, FormatError
from evaluation import (
    EvalReport,
    QueryOutcome,
    evaluate,
    filtered_rank,
    format_table,
    read_report,
    report_from_dict,
    report_to_dict,
    summarize,
    write_report,
)
from fuzzy_logic import FuzzySemantics
from link_predictor import EmbeddingTable
from query_language import instantiate_template
from query_sampler import LabeledQuery


def _sort_oracle(values: np.ndarray, target: int, exclude) -> int:
    """Position of the target in a full (score desc, id asc) sort with excluded entities removed"""
    kept = [e for e in range(len(values)) if e == target or e not in exclude]
    ordered = sorted(kept, key=lambda e: (-values[e], e))
    return ordered.index(target) + 1


def test_filtered_rank_examples():
    scores = [0.1, 0.9, 0.4, 0.9, 0.2]
    assert filtered_rank(scores, 1, set()) == 1
    assert filtered_rank(scores, 3, set()) == 2
    assert filtered_rank(scores, 3, {1}) == 1
    assert filtered_rank(scores, 2, {1}) == 2
    assert filtered_rank(torch.tensor(scores), 0, {4}) == 4


def test_filtered_rank_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for trial in range(10 ** 4):
        size = int(rng.integers(2, 30))
        # coarse values so that ties are common
        values = rng.integers(0, 6, size=size).astype(np.float64) / 5 if trial % 2 else rng.random(size)
        target = int(rng.integers(size))
        others = [e for e in range(size) if e != target]
        exclude = set(rng.choice(others, size=int(rng.integers(0, min(5, len(others)) + 1)), replace=False).tolist())
        assert filtered_rank(values, target, exclude) == _sort_oracle(values, target, exclude)


def test_filtered_rank_ignores_monotone_transforms():
    rng = np.random.default_rng(1)
    values = rng.random(30)
    exclude = {3, 7, 11, 20, 25}
    for target in range(30):
        if target in exclude:
            continue
        expected = filtered_rank(values, target, exclude)
        assert filtered_rank(np.exp(3 * values) - 2, target, exclude) == expected
        assert filtered_rank(np.concatenate([values, [-1.0]]), target, exclude) == expected


def test_target_in_exclusion_set_is_a_contract_violation():
    with pytest.raises(ContractViolationError):
        filtered_rank([0.5, 0.2], 0, {0})


def test_query_outcome_metrics():
    outcome = QueryOutcome("1p", [1, 2, 4])
    assert outcome.reciprocal == pytest.approx((1 + 0.5 + 0.25) / 3)
    assert outcome.hits(1) == pytest.approx(1 / 3)
    assert outcome.hits(3) == pytest.approx(2 / 3)


def _scored_world(scores):
    """Anchor e0 scores entity i+1 at scores[i] under r0"""
    entities = [[1.0, 0.0]] + [[math.log(s / (1 - s)), 0.0] for s in scores]
    lp = EmbeddingTable.from_arrays(entities, [[1.0, 0.0]], dtype=torch.float64)
    return QueryEngine(lp, None, FuzzySemantics(), k=len(entities))


def test_mrr_of_single_query_fixtures():
    engine = _scored_world([0.2, 0.9, 0.6])
    graph = instantiate_template("1p", [0], [0])
    first = LabeledQuery(graph, "1p", frozenset(), frozenset({2}))
    second = LabeledQuery(graph, "1p", frozenset(), frozenset({0}))
    assert evaluate(engine, [first]).per_type["1p"] == 1.0
    # e0 scores itself at sigmoid(1) ~ 0.73, above everything except e2
    assert evaluate(engine, [LabeledQuery(graph, "1p", frozenset(), frozenset({3}))]).per_type["1p"] == pytest.approx(1 / 3)
    assert evaluate(engine, [second]).per_type["1p"] == 0.5


def test_easy_answers_are_filtered_out():
    engine = _scored_world([0.2, 0.9, 0.6])
    graph = instantiate_template("1p", [0], [0])
    query = LabeledQuery(graph, "1p", frozenset({2, 0}), frozenset({3}))
    assert evaluate(engine, [query]).per_type["1p"] == 1.0


def test_queries_without_hard_answers_are_skipped(caplog):
    engine = _scored_world([0.2, 0.9])
    graph = instantiate_template("1p", [0], [0])
    with caplog.at_level(logging.WARNING):
        report = evaluate(engine, [LabeledQuery(graph, "1p", frozenset({1}), frozenset())])
    assert report.skipped == 1 and report.per_type == {}
    assert any("no hard answers" in record.message for record in caplog.records)


def test_memorizing_predictor_ranks_held_out_link_first():
    # every test link is also in train, so an overfit predictor puts it first
    train = [(0, 0, 1), (2, 0, 3), (4, 0, 5), (1, 1, 2), (3, 1, 4), (5, 1, 0)]
    kg = make_kg(train, valid=[(0, 0, 1)], test=[(2, 0, 3)], num_entities=6, num_relations=2)
    lp = trained_lp(kg, seed=0, dim=8, steps=400)
    engine = QueryEngine(lp, None, FuzzySemantics(), k=kg.num_entities, kg=kg)
    queries = [LabeledQuery(instantiate_template("1p", [s], [0]), "1p", frozenset(), frozenset({o}))
               for s, _, o in train[:3]]
    assert evaluate(engine, queries).per_type["1p"] == 1.0


def test_summarize_averages_per_query_then_per_type():
    outcomes = [
        QueryOutcome("2i", [1]),
        QueryOutcome("2i", [2, 4]),
        QueryOutcome("1p", [1]),
        QueryOutcome("2in", [5]),
        None,
    ]
    report = summarize(outcomes, {"k": 8})
    assert list(report.per_type) == ["1p", "2i", "2in"]
    assert report.per_type["2i"] == pytest.approx((1.0 + 0.375) / 2)
    assert report.counts == {"1p": 1, "2i": 2, "2in": 1}
    assert report.avg_p == pytest.approx((1.0 + 0.6875) / 2)
    assert report.avg_n == pytest.approx(0.2)
    assert report.hits["2i"]["hits@1"] == pytest.approx(0.5)
    assert report.skipped == 1
    assert report.config == {"k": 8}


def _report() -> EvalReport:
    return summarize([QueryOutcome("1p", [1]), QueryOutcome("2in", [2])], {"k": 4, "tnorm": "product"})


def test_format_table_has_benchmark_columns():
    text = format_table(_report())
    header, mrr, counts = text.splitlines()[:3]
    assert header.split() == ["1p", "2in", "avg_p", "avg_n"]
    assert mrr.split() == ["MRR", "100.0", "50.0", "100.0", "50.0"]
    assert counts.split() == ["queries", "1", "1"]


def test_format_table_appends_diagnostics():
    report = _report()
    report.diagnostics = {"raw": {"variance": 2.0, "min": -1.0, "max": 3.0}}
    assert "score distribution" in format_table(report)


def test_report_round_trip(tmp_path):
    report = _report()
    report.avg_n = math.nan
    path = tmp_path / "report.json"
    write_report(report, str(path))
    loaded = read_report(str(path))
    assert loaded.per_type == report.per_type
    assert loaded.avg_n is None
    assert loaded.config == report.config and loaded.hits == report.hits
    assert report_from_dict(report_to_dict(loaded)) == loaded


def test_reports_are_rejected_when_malformed(tmp_path):
    with pytest.raises(FormatError):
        report_from_dict({"counts": {}})
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(FormatError):
        read_report(str(path))
