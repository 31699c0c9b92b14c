#!/usr/bin/env python3
"""
Beam-search query answering
Greedy top-k substitution search over the query graph, one branch at a time,
with fuzzy aggregation of calibrated atom scores and an exhaustive oracle.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from errors import ConfigError, QueryValidationError, UnboundVariableError
from fuzzy_logic import FuzzySemantics, tconorm_fold, tnorm
from knowledge_graph import KnowledgeGraph
from link_predictor import EmbeddingTable
from query_language import Anchor, Atom, PlanStep, QueryGraph, Var, format_atom, plan_disjunct, validate_query
from score_adapter import DEFAULT_ENUM_BUDGET, AtomScorer, ScoreAdapter, exact_answer_scores

logger = logging.getLogger(__name__)

Ranking = List[Tuple[int, float]]


# ============================================================================
# TRACE
# ============================================================================

@dataclass(frozen=True)
class TraceEntry:
    """One retained substitution after a step"""
    parent: int                      # index into the previous step's entries, -1 at the first step
    entity: int                      # binding of the step's variable
    atom_scores: Tuple[float, ...]   # the step's atoms, in combination order
    score: float


@dataclass
class TraceStep:
    var: int
    atoms: Tuple[Atom, ...]
    entries: List[TraceEntry]


@dataclass
class Trace:
    """Per-branch record of every beam step"""
    sem: FuzzySemantics
    num_entities: int
    branches: List[List[TraceStep]] = field(default_factory=list)

    def _chain(self, steps: List[TraceStep], index: int) -> List[TraceEntry]:
        chain = []
        for step in reversed(steps):
            entry = step.entries[index]
            chain.append(entry)
            index = entry.parent
        return list(reversed(chain))

    def bindings(self, branch: int, index: int) -> Dict[int, int]:
        """Full substitution behind one final entry of a branch"""
        steps = self.branches[branch]
        return {step.var: entry.entity for step, entry in zip(steps, self._chain(steps, index))}

    def replay(self) -> Ranking:
        """Recompute the final ranking from the recorded atom scores alone"""
        vectors = []
        present = set()
        for steps in self.branches:
            vector = torch.zeros(self.num_entities, dtype=torch.float32)
            for index, final in enumerate(steps[-1].entries):
                score = None
                for entry in self._chain(steps, index):
                    for value in entry.atom_scores:
                        value = torch.tensor(value, dtype=torch.float32)
                        score = value if score is None else tnorm(self.sem, score, value)
                vector[final.entity] = score
                present.add(final.entity)
            vectors.append(vector)
        return rank_entities(tconorm_fold(self.sem, vectors), present)

    def explain(self, graph: QueryGraph, kg: Optional[KnowledgeGraph] = None, top: int = 3) -> str:
        def entity(e: int) -> str:
            return kg.entities.name_of(e) if kg is not None else f"#{e}"

        lines = []
        for number, steps in enumerate(self.branches, start=1):
            lines.append(f"branch {number}/{len(self.branches)}")
            for position, step in enumerate(steps, start=1):
                name = graph.var_names[step.var]
                lines.append(f"  step {position}: {name} from {format_atom(step.atoms[0], graph, kg)}")
                for atom in step.atoms[1:]:
                    lines.append(f"    and {format_atom(atom, graph, kg)}")
                for index, entry in enumerate(step.entries[:top]):
                    context = ""
                    if position > 1:
                        earlier = self._chain(steps[:position], index)[:-1]
                        context = " via " + ", ".join(
                            f"{graph.var_names[s.var]}={entity(e.entity)}" for s, e in zip(steps, earlier)
                        )
                    atoms = ", ".join(f"{value:.4f}" for value in entry.atom_scores)
                    lines.append(f"    {name}={entity(entry.entity)} score={entry.score:.6f} atoms=[{atoms}]{context}")
        return "\n".join(lines)


# ============================================================================
# BEAM SEARCH
# ============================================================================

def rank_entities(scores: torch.Tensor, candidates: Optional[Sequence[int]] = None) -> Ranking:
    """Entities by descending score, ascending id on ties"""
    values = scores.detach().cpu().numpy()
    ids = np.arange(len(values)) if candidates is None else np.asarray(sorted(candidates), dtype=np.int64)
    if len(ids) == 0:
        return []
    order = np.lexsort((ids, -values[ids]))
    return [(int(ids[i]), float(values[ids[i]])) for i in order]


def _atom_rows(scorer: AtomScorer, atom: Atom, bindings: np.ndarray, columns: Dict[int, int]) -> torch.Tensor:
    """(N, E) atom scores, one row per beam entry"""
    if isinstance(atom.arg1, Anchor):
        row = scorer.vector(atom.arg1.entity, atom.predicate, atom.negated)
        return row.unsqueeze(0).expand(len(bindings), -1)
    subjects = bindings[:, columns[atom.arg1.index]]
    return torch.stack([scorer.vector(int(s), atom.predicate, atom.negated) for s in subjects])


def _select(bindings: np.ndarray, resolved: List[int], live: List[int], scores: np.ndarray, k: int) -> np.ndarray:
    """Best entry per binding of the live variables, then the k best overall"""
    by_var = [bindings[:, resolved.index(v)] for v in sorted(resolved)]
    order = np.lexsort(tuple(reversed(by_var)) + (-scores,))
    key_columns = [resolved.index(v) for v in sorted(live)]
    if not key_columns:
        return order[:1]
    _, first = np.unique(bindings[order][:, key_columns], axis=0, return_index=True)
    return order[np.sort(first)][:k]


def _search_branch(scorer: AtomScorer, disjunct: Sequence[Atom], k: int,
                   kg: Optional[KnowledgeGraph]) -> Tuple[torch.Tensor, List[int], List[TraceStep]]:
    plan: List[PlanStep] = plan_disjunct(disjunct, kg)
    width = min(k, scorer.num_entities)
    resolved: List[int] = []
    bindings = np.zeros((1, 0), dtype=np.int64)
    partial: Optional[torch.Tensor] = None
    steps: List[TraceStep] = []

    for position, step in enumerate(plan):
        columns = {var: c for c, var in enumerate(resolved)}
        rows = _atom_rows(scorer, step.generator, bindings, columns)
        candidates = torch.sort(rows, dim=1, descending=True, stable=True).indices[:, :width]
        values = rows.gather(1, candidates)
        atom_scores = [values]
        score = values if partial is None else tnorm(scorer.sem, partial.unsqueeze(1), values)
        for atom in step.atoms[1:]:
            values = _atom_rows(scorer, atom, bindings, columns).gather(1, candidates)
            atom_scores.append(values)
            score = tnorm(scorer.sem, score, values)

        # parents index the previous step's kept entries
        parents = np.repeat(np.arange(len(bindings)), width)
        entities = candidates.reshape(-1).numpy()
        bindings = np.column_stack([bindings[parents], entities])
        resolved.append(step.var)
        flat_scores = score.reshape(-1)
        atom_matrix = torch.stack(atom_scores, dim=-1).reshape(-1, len(step.atoms)).numpy()

        later = {atom.arg1.index for s in plan[position + 1:] for atom in s.atoms if isinstance(atom.arg1, Var)}
        live = [var for var in resolved if var == 0 or var in later]
        kept = _select(bindings, resolved, live, flat_scores.numpy(), k)

        bindings = bindings[kept]
        partial = flat_scores[torch.as_tensor(kept)]
        steps.append(TraceStep(step.var, step.atoms, [
            TraceEntry(int(parents[i]), int(entities[i]), tuple(float(x) for x in atom_matrix[i]), float(flat_scores[i]))
            for i in kept
        ]))

    vector = torch.zeros(scorer.num_entities, dtype=partial.dtype)
    targets = bindings[:, resolved.index(0)]
    vector[torch.as_tensor(targets)] = partial
    return vector, [int(t) for t in targets], steps


def beam_answer(
    lp: EmbeddingTable,
    adapter: Optional[ScoreAdapter],
    sem: FuzzySemantics,
    query: QueryGraph,
    k: int,
    kg: Optional[KnowledgeGraph] = None,
) -> Tuple[Ranking, Trace]:
    """Rank the entities found in any final beam; absent entities score 0"""
    result = QueryEngine(lp, adapter, sem, k=k, kg=kg).answer(query)
    return result.ranking, result.trace


def score_assignment(
    lp: EmbeddingTable,
    adapter: Optional[ScoreAdapter],
    sem: FuzzySemantics,
    query: QueryGraph,
    substitution: Dict[int, int],
    kg: Optional[KnowledgeGraph] = None,
) -> float:
    """Query score under one full substitution"""
    return QueryEngine(lp, adapter, sem, kg=kg).score(query, substitution)


def exhaustive_answer(
    lp: EmbeddingTable,
    adapter: Optional[ScoreAdapter],
    sem: FuzzySemantics,
    query: QueryGraph,
    budget: int = DEFAULT_ENUM_BUDGET,
    kg: Optional[KnowledgeGraph] = None,
) -> Ranking:
    """Every entity ranked by its exact maximal query score"""
    return QueryEngine(lp, adapter, sem, kg=kg, budget=budget).exhaustive(query)


# ============================================================================
# ENGINE
# ============================================================================

@dataclass
class AnswerResult:
    ranking: Ranking
    scores: torch.Tensor            # (E,), 0 for entities outside every final beam
    trace: Optional[Trace] = None

    def top(self, n: int) -> Ranking:
        return self.ranking[:n]


class QueryEngine:
    """Predictor, adapter, semantics and beam width bundled for answering"""

    def __init__(
        self,
        lp: EmbeddingTable,
        adapter: Optional[ScoreAdapter] = None,
        sem: Optional[FuzzySemantics] = None,
        k: int = 1024,
        kg: Optional[KnowledgeGraph] = None,
        budget: int = DEFAULT_ENUM_BUDGET,
    ):
        if k < 1:
            raise ConfigError(f"Beam width must be at least 1, got {k}")
        self.lp = lp
        self.adapter = adapter
        self.sem = sem or FuzzySemantics()
        self.k = int(k)
        self.kg = kg
        self.budget = int(budget)

    def scorer(self) -> AtomScorer:
        return AtomScorer(self.lp, self.adapter, self.sem)

    @staticmethod
    def _check(query: QueryGraph) -> None:
        violations = validate_query(query)
        if violations:
            raise QueryValidationError(violations)

    def answer(self, query: QueryGraph, scorer: Optional[AtomScorer] = None, trace: bool = True) -> AnswerResult:
        self._check(query)
        scorer = scorer or self.scorer()
        record = Trace(self.sem, scorer.num_entities) if trace else None
        vectors, present = [], set()
        with torch.no_grad():
            for disjunct in query.disjuncts:
                vector, targets, steps = _search_branch(scorer, disjunct, self.k, self.kg)
                vectors.append(vector)
                present.update(targets)
                if record is not None:
                    record.branches.append(steps)
            scores = tconorm_fold(self.sem, vectors)
        return AnswerResult(rank_entities(scores, present), scores, record)

    def score(self, query: QueryGraph, substitution: Dict[int, int], scorer: Optional[AtomScorer] = None) -> float:
        scorer = scorer or self.scorer()
        branches = []
        with torch.no_grad():
            for disjunct in query.disjuncts:
                score = None
                for step in plan_disjunct(disjunct, self.kg):
                    for atom in step.atoms:
                        for term in (atom.arg1, atom.arg2):
                            if isinstance(term, Var) and term.index not in substitution:
                                raise UnboundVariableError(f"Variable {query.name_of(term)} is not bound")
                        value = scorer.atom_value(atom, substitution)
                        score = value if score is None else tnorm(self.sem, score, value)
                branches.append(score)
            return float(tconorm_fold(self.sem, branches))

    def exhaustive(self, query: QueryGraph, scorer: Optional[AtomScorer] = None) -> Ranking:
        self._check(query)
        scores = exact_answer_scores(scorer or self.scorer(), query, self.budget, self.kg)
        return rank_entities(scores)
