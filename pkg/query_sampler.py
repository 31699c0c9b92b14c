#!/usr/bin/env python3
"""
Benchmark-style query sampler
Instantiates the fourteen query structures by backward random walks and labels
answers as easy (also answers over the training graph) or hard (needing a missing link).
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence

import numpy as np

from config import component_seed
from errors import ConfigError, QueryParseError, SamplingBudgetError
from knowledge_graph import KnowledgeGraph, Scope, Split
from query_language import (
    QUERY_TYPES,
    QueryGraph,
    infer_query_type,
    instantiate_template,
    parse_query,
    query_template,
    serialize_query,
    template_slots,
    traverse_answers,
    validate_query,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledQuery:
    """A query with its easy and hard answer sets"""
    graph: QueryGraph
    query_type: str
    easy: FrozenSet[int]
    hard: FrozenSet[int]

    @property
    def answers(self) -> FrozenSet[int]:
        return self.easy | self.hard


class QuerySampler:
    """Rejection sampler for one knowledge graph and split role"""

    def __init__(
        self,
        kg: KnowledgeGraph,
        split: str = "test",
        max_answers: int = 100,
        attempt_cap: int = 1000,
        seed: int = 0,
    ):
        try:
            self.split = Split(split)
        except ValueError:
            raise ConfigError(f"Unknown split '{split}' for sampling (expected train, valid or test)")
        if max_answers < 1:
            raise ConfigError("max_answers must be positive")
        if attempt_cap < 1:
            raise ConfigError("attempt_cap must be positive")
        if self.split is not Split.TRAIN and not all(len(kg.triples[s]) for s in Split):
            raise ConfigError("Sampling evaluation queries needs train, valid and test triples")

        self.kg = kg
        self.max_answers = max_answers
        self.attempt_cap = attempt_cap
        self.seed = seed
        self.walk_scope = Scope.TRAIN_ONLY if self.split is Split.TRAIN else Scope.ALL_SPLITS
        self._incoming = self._build_incoming(kg.scope_triples(self.walk_scope))
        self._targets = np.array(sorted(self._incoming), dtype=np.int64)

    @staticmethod
    def _build_incoming(triples: np.ndarray) -> Dict[int, np.ndarray]:
        """object -> (subject, relation) rows, duplicates across splits removed"""
        if len(triples) == 0:
            return {}
        unique = np.unique(triples, axis=0)
        order = np.argsort(unique[:, 2], kind="stable")
        ordered = unique[order]
        objects, starts = np.unique(ordered[:, 2], return_index=True)
        ends = np.append(starts[1:], len(ordered))
        return {int(o): ordered[s:e, :2] for o, s, e in zip(objects, starts, ends)}

    def _instantiate(self, query_type: str, rng: np.random.Generator) -> Optional[QueryGraph]:
        """One backward walk from a random target; None when the walk gets stuck"""
        num_vars, disjuncts = query_template(query_type)
        num_anchors, num_relations = template_slots(query_type)
        atoms = [atom for disjunct in disjuncts for atom in disjunct]

        bound: Dict[int, int] = {0: int(rng.choice(self._targets))}
        anchors: Dict[int, int] = {}
        relations: Dict[int, int] = {}
        done = [False] * len(atoms)

        while not all(done):
            progressed = False
            for position, atom in enumerate(atoms):
                if done[position] or atom.object not in bound:
                    continue
                edges = self._incoming.get(bound[atom.object])
                if edges is None:
                    return None
                mask = np.ones(len(edges), dtype=bool)
                if atom.relation in relations:
                    mask &= edges[:, 1] == relations[atom.relation]
                if isinstance(atom.subject, str):
                    slot = int(atom.subject[1:])
                    if slot in anchors:
                        mask &= edges[:, 0] == anchors[slot]
                elif atom.subject in bound:
                    mask &= edges[:, 0] == bound[atom.subject]
                choices = np.flatnonzero(mask)
                if len(choices) == 0:
                    return None
                subject, relation = (int(x) for x in edges[int(rng.choice(choices))])
                relations[atom.relation] = relation
                if isinstance(atom.subject, str):
                    anchors[int(atom.subject[1:])] = subject
                else:
                    bound[atom.subject] = subject
                done[position] = True
                progressed = True
            if not progressed:
                return None

        graph = instantiate_template(
            query_type,
            [anchors[i] for i in range(num_anchors)],
            [relations[i] for i in range(num_relations)],
        )
        if any(len(set(disjunct)) != len(disjunct) for disjunct in graph.disjuncts):
            return None
        if len(set(graph.disjuncts)) != len(graph.disjuncts):
            return None
        return graph

    def label(self, graph: QueryGraph, query_type: str) -> LabeledQuery:
        easy = traverse_answers(self.kg, graph, Scope.TRAIN_ONLY)
        if self.split is Split.TRAIN:
            return LabeledQuery(graph, query_type, easy, frozenset())
        # a held-out negated edge can drop a training answer
        full = traverse_answers(self.kg, graph, Scope.ALL_SPLITS)
        easy = easy & full
        return LabeledQuery(graph, query_type, easy, full - easy)

    def _accept(self, query: LabeledQuery) -> bool:
        if len(query.answers) > self.max_answers:
            return False
        if self.split is Split.TRAIN:
            return bool(query.easy)
        return bool(query.hard)

    def sample_one(self, query_type: str, index: int) -> LabeledQuery:
        """The index-th query of a type; depends only on (seed, split, type, index)"""
        rng = np.random.default_rng(component_seed(self.seed, f"sampler:{self.split.value}:{query_type}:{index}"))
        for _ in range(self.attempt_cap):
            graph = self._instantiate(query_type, rng)
            if graph is None or validate_query(graph):
                continue
            query = self.label(graph, query_type)
            if self._accept(query):
                return query
        raise SamplingBudgetError(
            f"No acceptable {query_type} query after {self.attempt_cap} attempts "
            f"(split={self.split.value}, max_answers={self.max_answers})"
        )

    def sample(self, query_type: str, count: int, threads: int = 1) -> List[LabeledQuery]:
        if query_type not in QUERY_TYPES:
            raise ConfigError(f"Unknown query type '{query_type}'")
        if count <= 0:
            return []
        if len(self._targets) == 0:
            raise SamplingBudgetError(f"The {self.walk_scope.value} graph has no edges to walk")
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as executor:
                return list(executor.map(lambda i: self.sample_one(query_type, i), range(count)))
        return [self.sample_one(query_type, i) for i in range(count)]


def sample_queries(
    kg: KnowledgeGraph,
    query_type: str,
    count: int,
    max_answers: int = 100,
    seed: int = 0,
    split: str = "test",
    attempt_cap: int = 1000,
    threads: int = 1,
) -> List[LabeledQuery]:
    """Sample count labelled queries of one structure"""
    sampler = QuerySampler(kg, split=split, max_answers=max_answers, attempt_cap=attempt_cap, seed=seed)
    queries = sampler.sample(query_type, count, threads=threads)
    logger.info(f"📊 Sampled {len(queries)} {query_type} queries ({split})")
    return queries


# ============================================================================
# QUERY FILES
# ============================================================================

def query_record(query: LabeledQuery, kg: KnowledgeGraph) -> str:
    record = {
        "type": query.query_type,
        "query": serialize_query(query.graph, kg),
        "easy": [kg.entities.name_of(e) for e in sorted(query.easy)],
        "hard": [kg.entities.name_of(e) for e in sorted(query.hard)],
    }
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def write_query_file(path: str, queries: Sequence[LabeledQuery], kg: KnowledgeGraph) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for query in queries:
            handle.write(query_record(query, kg) + "\n")
    logger.info(f"✅ Wrote {len(queries)} queries to {path}")


def read_query_file(path: str, kg: KnowledgeGraph, types: Optional[Sequence[str]] = None) -> List[LabeledQuery]:
    """Load labelled queries, optionally keeping only some structures"""
    queries = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                graph = parse_query(record["query"], kg)
                query_type = record.get("type") or infer_query_type(graph)
                easy = frozenset(kg.entities.id_of(name) for name in record.get("easy", []))
                hard = frozenset(kg.entities.id_of(name) for name in record.get("hard", []))
            except (json.JSONDecodeError, KeyError) as exc:
                raise QueryParseError(f"{path}:{line_number}: bad query record ({exc})")
            if types is not None and query_type not in types:
                continue
            queries.append(LabeledQuery(graph, query_type, easy, hard))
    return queries
