"""Shared fixtures and small graph builders for the kgcal tests"""

import itertools
from typing import Dict, FrozenSet, List, Sequence, Tuple

import numpy as np
import pytest
import torch

from knowledge_graph import KnowledgeGraph, Scope, Split, Vocabulary, add_reciprocals
from link_predictor import EmbeddingTable, LpTrainConfig, train_lp
from query_language import Anchor, QueryGraph, Var, instantiate_template, template_slots


def write_tsv(path, rows: Sequence[Tuple[str, str, str]]) -> str:
    path.write_text("".join("\t".join(row) + "\n" for row in rows), encoding="utf-8")
    return str(path)


def make_kg(
    train: Sequence[Tuple[int, int, int]],
    valid: Sequence[Tuple[int, int, int]] = (),
    test: Sequence[Tuple[int, int, int]] = (),
    num_entities: int = None,
    num_relations: int = None,
    reciprocals: bool = True,
) -> KnowledgeGraph:
    """Graph over entities e0, e1, ... and relations r0, r1, ... from id triples"""
    rows = list(train) + list(valid) + list(test)
    num_entities = num_entities or 1 + max(max(s, o) for s, _, o in rows)
    num_relations = num_relations or 1 + max(p for _, p, _ in rows)
    kg = KnowledgeGraph(
        Vocabulary(f"e{i}" for i in range(num_entities)),
        Vocabulary(f"r{i}" for i in range(num_relations)),
        {
            Split.TRAIN: np.array(train, dtype=np.int64).reshape(-1, 3),
            Split.VALID: np.array(valid, dtype=np.int64).reshape(-1, 3),
            Split.TEST: np.array(test, dtype=np.int64).reshape(-1, 3),
        },
    )
    return add_reciprocals(kg) if reciprocals else kg


def random_kg(seed: int, num_entities: int = 20, num_relations: int = 3, edges_per_relation: int = 30) -> KnowledgeGraph:
    rng = np.random.default_rng(seed)
    triples = set()
    for relation in range(num_relations):
        for _ in range(edges_per_relation):
            s, o = rng.choice(num_entities, size=2, replace=False)
            triples.add((int(s), relation, int(o)))
    rows = sorted(triples)
    rows = [rows[i] for i in rng.permutation(len(rows))]
    cut_train, cut_valid = int(0.8 * len(rows)), int(0.9 * len(rows))
    return make_kg(rows[:cut_train], rows[cut_train:cut_valid], rows[cut_valid:],
                   num_entities=num_entities, num_relations=num_relations)


def trained_lp(kg: KnowledgeGraph, seed: int = 0, dim: int = 16, steps: int = 150) -> EmbeddingTable:
    config = LpTrainConfig(dim=dim, steps=steps, batch_size=128, seed=seed, log_every=10 ** 6)
    return train_lp(kg, config)


def random_queries(kg: KnowledgeGraph, query_type: str, count: int, seed: int) -> List[QueryGraph]:
    rng = np.random.default_rng(seed)
    num_anchors, num_relations = template_slots(query_type)
    return [
        instantiate_template(
            query_type,
            rng.integers(kg.num_entities, size=num_anchors).tolist(),
            rng.integers(kg.num_relations, size=num_relations).tolist(),
        )
        for _ in range(count)
    ]


def brute_force_answers(kg: KnowledgeGraph, graph: QueryGraph, scope: Scope) -> FrozenSet[int]:
    """Boolean semantics by enumerating every substitution of each branch"""
    edges = {tuple(int(x) for x in row) for row in kg.scope_triples(scope)}
    answers = set()
    for disjunct in graph.disjuncts:
        variables = sorted({arg.index for atom in disjunct for arg in (atom.arg1, atom.arg2) if isinstance(arg, Var)})
        for values in itertools.product(range(kg.num_entities), repeat=len(variables)):
            binding: Dict[int, int] = dict(zip(variables, values))

            def holds(atom) -> bool:
                subject = atom.arg1.entity if isinstance(atom.arg1, Anchor) else binding[atom.arg1.index]
                present = (subject, atom.predicate, binding[atom.arg2.index]) in edges
                return not present if atom.negated else present

            if all(holds(atom) for atom in disjunct):
                answers.add(binding[0])
    return frozenset(answers)


@pytest.fixture
def chain_kg() -> KnowledgeGraph:
    """e0 -r0-> e1 -r1-> e2 in train, e0 -r0-> e3 only in test"""
    return make_kg(
        train=[(0, 0, 1), (1, 1, 2), (4, 0, 1)],
        valid=[(4, 1, 2)],
        test=[(0, 0, 3)],
        num_entities=5,
        num_relations=2,
    )


@pytest.fixture(scope="session")
def oracle_worlds() -> List[Tuple[KnowledgeGraph, EmbeddingTable]]:
    """Five random toy graphs, each with a trained d=16 predictor"""
    torch.manual_seed(0)
    worlds = []
    for seed in range(5):
        kg = random_kg(seed, num_entities=16 + seed, num_relations=2 + seed % 3)
        worlds.append((kg, trained_lp(kg, seed=seed)))
    return worlds
