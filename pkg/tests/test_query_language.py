import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_force_answers, make_kg, random_queries
from errors import ConfigError, QueryParseError, QueryValidationError
from knowledge_graph import KnowledgeGraph, Scope, Split, Vocabulary
from query_language import (
    QUERY_TYPES,
    Anchor,
    Atom,
    QueryGraph,
    Var,
    infer_query_type,
    instantiate_template,
    parse_query,
    plan_disjunct,
    query_template,
    serialize_query,
    template_slots,
    traverse_answers,
    validate_query,
)


@pytest.fixture
def people_kg() -> KnowledgeGraph:
    return KnowledgeGraph(
        Vocabulary(["alice", "bob", "carol", "New York", "exists"]),
        Vocabulary(["knows", "lives_in", "born in"]),
        {Split.TRAIN: [[0, 0, 1], [1, 1, 3], [2, 0, 1]]},
    )


def test_parse_projection_chain(people_kg):
    graph = parse_query("?T : exists V . knows(alice, V) & lives_in(V, T)", people_kg)
    assert graph.num_vars == 2
    assert graph.var_names == ("T", "V")
    assert graph.disjuncts == ((Atom(0, Anchor(0), Var(1)), Atom(1, Var(1), Var(0))),)
    assert infer_query_type(graph) == "2p"


def test_parse_union_and_negation(people_kg):
    graph = parse_query("?X : knows(alice, X) | (knows(bob, X) & !knows(carol, X))", people_kg)
    assert len(graph.disjuncts) == 2
    assert graph.disjuncts[1][1].negated
    assert infer_query_type(graph) == "custom"


def test_quoted_names(people_kg):
    graph = parse_query('?T : "born in"("New York", T)', people_kg)
    assert graph.disjuncts[0][0] == Atom(2, Anchor(3), Var(0))
    text = serialize_query(graph, people_kg)
    assert text == '?T : "born in"("New York", T)'


def test_entity_named_like_keyword_round_trips(people_kg):
    graph = parse_query('?T : knows("exists", T)', people_kg)
    assert graph.disjuncts[0][0].arg1 == Anchor(4)
    assert parse_query(serialize_query(graph, people_kg), people_kg) == graph


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("?T : likes(alice, T)", "Unknown relation 'likes'"),
        ("?T : knows(dave, T)", "undeclared variable 'dave'"),
        ("?T knows(alice, T)", "Expected ':'"),
        ("?T : knows(alice, T) extra", "after query body"),
        ("?T : exists T . knows(alice, T)", "declared twice"),
        ("?T : knows(alice; T)", "Unexpected character"),
    ],
)
def test_parse_errors(people_kg, text, fragment):
    with pytest.raises(QueryParseError) as info:
        parse_query(text, people_kg)
    assert fragment in str(info.value)


def test_parse_error_carries_position(people_kg):
    with pytest.raises(QueryParseError) as info:
        parse_query("?T : knows(alice, T) &", people_kg)
    assert info.value.position == len("?T : knows(alice, T) &")


def test_negation_as_sole_support_is_rejected(people_kg):
    with pytest.raises(QueryValidationError) as info:
        parse_query("?T : !knows(alice, T)", people_kg)
    assert any("negated atom is the sole support of T" in v for v in info.value.violations)


def test_validation_finds_cycles_and_extra_sinks():
    cyclic = QueryGraph(((Atom(0, Anchor(0), Var(1)), Atom(0, Var(1), Var(2)), Atom(0, Var(2), Var(1)),
                          Atom(0, Var(1), Var(0))),), 3)
    assert any("not acyclic" in v for v in validate_query(cyclic))

    two_sinks = QueryGraph(((Atom(0, Anchor(0), Var(0)), Atom(0, Anchor(0), Var(1))),), 2)
    assert any("unique sink" in v for v in validate_query(two_sinks))

    anchor_object = QueryGraph(((Atom(0, Anchor(0), Var(0)), Atom(0, Var(0), Anchor(1))),), 1)
    assert any("anchor used as object" in v for v in validate_query(anchor_object))

    unused = QueryGraph(((Atom(0, Anchor(0), Var(0)),),), 2)
    assert validate_query(unused) == ["unused variable V1"]


@pytest.mark.parametrize("query_type", QUERY_TYPES)
def test_templates_are_valid_and_recognised(query_type):
    num_anchors, num_relations = template_slots(query_type)
    graph = instantiate_template(query_type, list(range(num_anchors)), list(range(num_relations)))
    assert validate_query(graph) == []
    assert infer_query_type(graph) == query_type


def test_unknown_template():
    with pytest.raises(ConfigError):
        query_template("4p")


def test_plan_prefers_anchored_generator_with_fewest_neighbours():
    kg = make_kg(train=[(0, 0, 2), (0, 0, 3), (0, 0, 4), (1, 1, 2)], num_entities=5, num_relations=2)
    graph = instantiate_template("2in", [0, 1], [0, 1])
    plan = plan_disjunct(graph.disjuncts[0], kg)
    assert plan[0].generator == graph.disjuncts[0][0]

    graph = instantiate_template("2i", [0, 1], [0, 1])
    plan = plan_disjunct(graph.disjuncts[0], kg)
    assert [step.var for step in plan] == [0]
    assert plan[0].generator == graph.disjuncts[0][1]

    pni = instantiate_template("pni", [0, 1], [0, 1, 1])
    plan = plan_disjunct(pni.disjuncts[0])
    assert [step.var for step in plan] == [1, 0]
    assert plan[1].generator == Atom(1, Anchor(1), Var(0))
    assert plan[1].atoms[-1].negated


def test_traversal_on_chain(chain_kg):
    graph = instantiate_template("2p", [0], [0, 1])
    assert traverse_answers(chain_kg, graph, Scope.TRAIN_ONLY) == {2}
    negated = instantiate_template("2in", [4, 0], [0, 0])
    assert traverse_answers(chain_kg, negated, Scope.TRAIN_ONLY) == frozenset()
    assert traverse_answers(chain_kg, instantiate_template("1p", [0], [0]), Scope.ALL_SPLITS) == {1, 3}


@pytest.mark.parametrize("query_type", QUERY_TYPES)
def test_traversal_matches_brute_force(oracle_worlds, query_type):
    for number, (kg, _) in enumerate(oracle_worlds):
        for graph in random_queries(kg, query_type, 20, seed=number):
            for scope in Scope:
                assert traverse_answers(kg, graph, scope) == brute_force_answers(kg, graph, scope)


_NAME_CHARS = st.characters(min_codepoint=32, max_codepoint=0x2FF, exclude_characters="\t\n\r")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.text(_NAME_CHARS, min_size=1, max_size=8), min_size=3, max_size=3, unique=True),
       st.text(_NAME_CHARS, min_size=1, max_size=8))
def test_serialize_parse_round_trip(entity_names, relation_name):
    kg = KnowledgeGraph(Vocabulary(entity_names), Vocabulary([relation_name]), {Split.TRAIN: [[0, 0, 1]]})
    for query_type in ("1p", "2i", "pin", "up"):
        num_anchors, num_relations = template_slots(query_type)
        graph = instantiate_template(query_type, [i % 3 for i in range(num_anchors)], [0] * num_relations)
        assert parse_query(serialize_query(graph, kg), kg, validate=False) == graph
