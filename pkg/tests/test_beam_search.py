import math

import numpy as np
import pytest
import torch

from beam_search import QueryEngine, beam_answer, exhaustive_answer, rank_entities, score_assignment
from conftest import random_queries
from errors import BudgetExceededError, ConfigError, QueryValidationError, UnboundVariableError
from fuzzy_logic import FuzzySemantics, Negation, TNorm
from link_predictor import EmbeddingTable
from query_language import QUERY_TYPES, Anchor, Atom, QueryGraph, Var, instantiate_template
from score_adapter import ScoreAdapter

PRODUCT = FuzzySemantics(TNorm.PRODUCT, Negation.STANDARD)
GODEL = FuzzySemantics(TNorm.GODEL, Negation.STANDARD)
# every branch binds only the target, so beams at width k are prefixes of beams at any wider width
SINGLE_STEP_TYPES = ("1p", "2i", "3i", "2u", "2in", "3in")


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _hand_table(entities, relations) -> EmbeddingTable:
    return EmbeddingTable.from_arrays(entities, relations, dtype=torch.float64)


@pytest.mark.parametrize("query_type", QUERY_TYPES)
def test_full_width_beam_matches_exhaustive_enumeration(oracle_worlds, query_type):
    for number, (kg, lp) in enumerate(oracle_worlds):
        adapter = ScoreAdapter(lp.dim, condition="predicate")
        for sem in (PRODUCT, GODEL):
            for graph in random_queries(kg, query_type, 20, seed=100 + number):
                ranking, _ = beam_answer(lp, adapter, sem, graph, k=kg.num_entities, kg=kg)
                assert ranking == exhaustive_answer(lp, adapter, sem, graph, kg=kg)


@pytest.mark.parametrize("query_type", QUERY_TYPES)
def test_zero_adapter_reproduces_uncalibrated_rankings(oracle_worlds, query_type):
    for number, (kg, lp) in enumerate(oracle_worlds):
        modes = ("global", "predicate", "subject-predicate", "full") if number == 0 else ("predicate",)
        for graph in random_queries(kg, query_type, 20, seed=200 + number):
            plain = QueryEngine(lp, None, PRODUCT, k=8, kg=kg).answer(graph)
            for mode in modes:
                calibrated = QueryEngine(lp, ScoreAdapter(lp.dim, condition=mode), PRODUCT, k=8, kg=kg).answer(graph)
                assert calibrated.ranking == plain.ranking
                assert torch.equal(calibrated.scores, plain.scores)


@pytest.mark.parametrize("query_type", QUERY_TYPES)
def test_trace_replay_reproduces_ranking(oracle_worlds, query_type):
    kg, lp = oracle_worlds[1]
    for graph in random_queries(kg, query_type, 5, seed=3):
        result = QueryEngine(lp, None, PRODUCT, k=4, kg=kg).answer(graph)
        assert result.trace.replay() == result.ranking
        assert all(0.0 <= score <= 1.0 for _, score in result.ranking)


def test_top_entry_score_equals_its_substitution_score(oracle_worlds):
    kg, lp = oracle_worlds[2]
    for graph in random_queries(kg, "3p", 10, seed=4):
        _, trace = beam_answer(lp, None, GODEL, graph, k=5, kg=kg)
        final = trace.branches[0][-1].entries[0]
        substitution = trace.bindings(0, 0)
        assert set(substitution) == {0, 1, 2}
        assert substitution[0] == final.entity
        assert score_assignment(lp, None, GODEL, graph, substitution, kg=kg) == final.score


@pytest.mark.parametrize("query_type", SINGLE_STEP_TYPES)
def test_widening_the_beam_never_lowers_the_best_score(oracle_worlds, query_type):
    kg, lp = oracle_worlds[3]
    for graph in random_queries(kg, query_type, 10, seed=5):
        best = [beam_answer(lp, None, PRODUCT, graph, k=k, kg=kg)[0][0][1] for k in (1, 3, 8, kg.num_entities)]
        assert best == sorted(best)


@pytest.mark.parametrize("query_type", sorted(set(QUERY_TYPES) - set(SINGLE_STEP_TYPES)))
def test_full_width_beats_every_narrower_beam_on_chains(oracle_worlds, query_type):
    # narrower beams may still beat wider ones here; a mid-chain prune can drop a strong last hop
    kg, lp = oracle_worlds[3]
    for graph in random_queries(kg, query_type, 10, seed=5):
        exact = beam_answer(lp, None, PRODUCT, graph, k=kg.num_entities, kg=kg)[0][0][1]
        for k in (1, 3, 8):
            assert beam_answer(lp, None, PRODUCT, graph, k=k, kg=kg)[0][0][1] <= exact + 1e-12


def test_single_atom_ranking_is_the_score_vector():
    # anchor 0 is the complex number 1 and scores itself at sigmoid(1); entity i scores its real part under r0
    scores = [0.9, 0.2, 0.7, 0.7, 0.1]
    entities = [[1.0, 0.0]] + [[_logit(s), 0.0] for s in scores]
    lp = _hand_table(entities, [[1.0, 0.0]])
    ranking, trace = beam_answer(lp, None, PRODUCT, instantiate_template("1p", [0], [0]), k=3)
    assert [entity for entity, _ in ranking] == [1, 0, 3]
    assert ranking[0][1] == pytest.approx(0.9)
    assert len(trace.branches) == 1 and len(trace.branches[0][0].entries) == 3

    everything = exhaustive_answer(lp, None, PRODUCT, instantiate_template("1p", [0], [0]))
    assert [entity for entity, _ in everything] == [1, 0, 3, 4, 2, 5]


def test_union_combines_branches_with_the_tconorm():
    lp = _hand_table([[1.0, 0.0], [_logit(0.6), _logit(0.3)]], [[1.0, 0.0], [0.0, 1.0]])
    union = instantiate_template("2u", [0, 0], [0, 1])
    result = QueryEngine(lp, None, PRODUCT, k=2).answer(union)
    assert dict(result.ranking)[1] == pytest.approx(0.72)


def test_negated_atom_rescores_with_godel():
    # e0 anchor, e1 the intermediate, e2 the candidate answer
    entities = [[1.0, 0.0], [1.0, 0.0], [_logit(0.9), _logit(0.2)]]
    relations = [[_logit(0.8), 0.0], [1.0, 0.0], [0.0, 1.0]]
    lp = _hand_table(entities, relations)
    pin = instantiate_template("pin", [0, 0], [0, 1, 2])
    assert score_assignment(lp, None, GODEL, pin, {0: 2, 1: 1}) == pytest.approx(0.8)
    assert score_assignment(lp, None, PRODUCT, pin, {0: 2, 1: 1}) == pytest.approx(0.8 * 0.9 * 0.8)


def test_flat_scores_rank_by_entity_id():
    lp = EmbeddingTable.from_arrays(np.zeros((6, 4)), np.zeros((2, 4)))
    graph = instantiate_template("pi", [0, 1], [0, 1, 0])
    assert [e for e, _ in exhaustive_answer(lp, None, PRODUCT, graph)] == list(range(6))
    assert [e for e, _ in beam_answer(lp, None, PRODUCT, graph, k=6)[0]] == list(range(6))


def test_rank_entities_restricts_to_candidates():
    scores = torch.tensor([0.5, 0.9, 0.5, 0.1])
    assert rank_entities(scores) == [(1, pytest.approx(0.9)), (0, 0.5), (2, 0.5), (3, pytest.approx(0.1))]
    assert [e for e, _ in rank_entities(scores, {3, 2})] == [2, 3]
    assert rank_entities(scores, set()) == []


def test_answers_are_deterministic(oracle_worlds):
    kg, lp = oracle_worlds[4]
    graph = random_queries(kg, "ip", 1, seed=6)[0]
    first = QueryEngine(lp, None, PRODUCT, k=3, kg=kg).answer(graph)
    second = QueryEngine(lp, None, PRODUCT, k=3, kg=kg).answer(graph)
    assert first.ranking == second.ranking
    assert first.trace.explain(graph, kg) == second.trace.explain(graph, kg)


def test_explain_names_steps_and_bindings(oracle_worlds):
    kg, lp = oracle_worlds[0]
    graph = instantiate_template("up", [0, 1], [0, 1, 0])
    _, trace = beam_answer(lp, None, PRODUCT, graph, k=2, kg=kg)
    text = trace.explain(graph, kg, top=2)
    assert "branch 1/2" in text and "branch 2/2" in text
    assert "step 1: V1 from" in text and "step 2: T from" in text
    assert "via V1=e" in text


def test_beam_width_must_be_positive(oracle_worlds):
    _, lp = oracle_worlds[0]
    with pytest.raises(ConfigError):
        QueryEngine(lp, k=0)
    with pytest.raises(ConfigError):
        beam_answer(lp, None, PRODUCT, instantiate_template("1p", [0], [0]), k=0)


def test_invalid_query_is_rejected(oracle_worlds):
    _, lp = oracle_worlds[0]
    two_sinks = QueryGraph(((Atom(0, Anchor(0), Var(0)), Atom(0, Anchor(1), Var(1))),), 2)
    with pytest.raises(QueryValidationError):
        QueryEngine(lp).answer(two_sinks)


def test_partial_substitution_is_rejected(oracle_worlds):
    _, lp = oracle_worlds[0]
    with pytest.raises(UnboundVariableError):
        score_assignment(lp, None, PRODUCT, instantiate_template("2p", [0], [0, 1]), {0: 3})


def test_enumeration_budget(oracle_worlds):
    kg, lp = oracle_worlds[0]
    graph = instantiate_template("3p", [0], [0, 1, 0])
    with pytest.raises(BudgetExceededError):
        exhaustive_answer(lp, None, PRODUCT, graph, budget=kg.num_entities ** 3 - 1)
    assert len(exhaustive_answer(lp, None, PRODUCT, graph, budget=kg.num_entities ** 3)) == kg.num_entities
