#!/usr/bin/env python3
"""
Knowledge graph storage for kgcal
Ingests split-tagged TSV triples, builds dense vocabularies and (s, p) -> objects indexes
"""

import logging
import os
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, FormatError, IdempotencyError, ShapeMismatchError, TripleParseError
from snapshot_io import read_container, write_container

logger = logging.getLogger(__name__)

RECIPROCAL_SUFFIX = "^-1"


class Split(str, Enum):
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"


class Scope(str, Enum):
    """Which splits an index covers"""
    TRAIN_ONLY = "train-only"
    ALL_SPLITS = "all-splits"


class Vocabulary:
    """Bijection between names and dense ids, in first-seen order"""

    def __init__(self, names: Optional[Iterable[str]] = None):
        self._names: List[str] = []
        self._ids: Dict[str, int] = {}
        for name in names or ():
            self.add(name)

    def add(self, name: str) -> int:
        index = self._ids.get(name)
        if index is None:
            index = len(self._names)
            self._names.append(name)
            self._ids[name] = index
        return index

    def id_of(self, name: str) -> int:
        return self._ids[name]

    def name_of(self, index: int) -> str:
        return self._names[index]

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)

    @property
    def names(self) -> List[str]:
        return list(self._names)


class KnowledgeGraph:
    """Vocabularies, split-tagged triples and adjacency indexes

    Treated as immutable once built: operations that change the graph
    return a new instance.
    """

    def __init__(
        self,
        entities: Vocabulary,
        relations: Vocabulary,
        triples: Dict[Split, np.ndarray],
        derived: Optional[Dict[Split, np.ndarray]] = None,
        num_original_relations: Optional[int] = None,
        stats: Optional[Dict[str, int]] = None,
    ):
        self.entities = entities
        self.relations = relations
        self.triples = {split: np.asarray(triples.get(split, np.zeros((0, 3))), dtype=np.int64).reshape(-1, 3)
                        for split in Split}
        self.derived = {
            split: (np.asarray(derived[split], dtype=bool) if derived and split in derived
                    else np.zeros(len(self.triples[split]), dtype=bool))
            for split in Split
        }
        self.num_original_relations = num_original_relations if num_original_relations is not None else len(relations)
        self.stats = dict(stats or {})
        self._indexes = {scope: self._build_index(scope) for scope in Scope}

    # ------------------------------------------------------------------
    # properties
    # ------------------------------------------------------------------

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def has_reciprocals(self) -> bool:
        return self.num_relations == 2 * self.num_original_relations and self.num_original_relations > 0

    def reciprocal_of(self, relation: int) -> int:
        if not self.has_reciprocals:
            raise ConfigError("Knowledge graph has no reciprocal relations")
        if relation < self.num_original_relations:
            return relation + self.num_original_relations
        return relation - self.num_original_relations

    def scope_triples(self, scope: Scope) -> np.ndarray:
        if Scope(scope) is Scope.TRAIN_ONLY:
            return self.triples[Split.TRAIN]
        return np.concatenate([self.triples[split] for split in Split], axis=0)

    # ------------------------------------------------------------------
    # indexes
    # ------------------------------------------------------------------

    def _build_index(self, scope: Scope) -> Dict[Tuple[int, int], np.ndarray]:
        triples = self.scope_triples(scope)
        if len(triples) == 0:
            return {}
        order = np.lexsort((triples[:, 2], triples[:, 1], triples[:, 0]))
        ordered = triples[order]
        keys = ordered[:, :2]
        boundaries = np.flatnonzero(np.any(keys[1:] != keys[:-1], axis=1)) + 1
        starts = np.concatenate([[0], boundaries])
        ends = np.concatenate([boundaries, [len(ordered)]])
        index = {}
        for start, end in zip(starts, ends):
            # the same triple may sit in several splits
            index[(int(ordered[start, 0]), int(ordered[start, 1]))] = np.unique(ordered[start:end, 2])
        return index

    def objects(self, subject: int, relation: int, scope: Scope = Scope.ALL_SPLITS) -> np.ndarray:
        """Sorted object ids of (subject, relation) in the given scope"""
        return self._indexes[Scope(scope)].get((int(subject), int(relation)), np.zeros(0, dtype=np.int64))

    def degree(self, subject: int, relation: int, scope: Scope = Scope.TRAIN_ONLY) -> int:
        return len(self.objects(subject, relation, scope))

    def index_items(self, scope: Scope):
        return sorted(self._indexes[Scope(scope)].items())

    def summary(self) -> Dict[str, int]:
        return {
            "entities": self.num_entities,
            "relations": self.num_relations,
            "original_relations": self.num_original_relations,
            **{f"{split.value}_triples": int(len(self.triples[split])) for split in Split},
        }


# ============================================================================
# INGESTION
# ============================================================================

def ingest_triples(paths: Sequence[Tuple[str, str]]) -> KnowledgeGraph:
    """Read tab-separated triple files into a KnowledgeGraph

    Args:
        paths: (path, split-role) pairs; ids are assigned in first-seen order
            across the files in the order given

    Returns:
        KnowledgeGraph without reciprocal relations
    """
    if not paths:
        raise ConfigError("No triple files given for ingestion")

    entities = Vocabulary()
    relations = Vocabulary()
    rows: Dict[Split, List[Tuple[int, int, int]]] = {split: [] for split in Split}
    seen: Dict[Split, set] = {split: set() for split in Split}
    stats = {"lines": 0, "blank": 0, "duplicates": 0}

    for path, role in paths:
        try:
            split = Split(role)
        except ValueError:
            raise ConfigError(f"Unknown split role '{role}' for {path} (expected train, valid or test)")
        if not os.path.exists(path):
            raise ConfigError(f"Triple file not found: {path}")

        with open(path, "r", encoding="utf-8") as handle:
            for line_number, line in enumerate(handle, start=1):
                stats["lines"] += 1
                line = line.rstrip("\r\n")
                if not line.strip():
                    stats["blank"] += 1
                    continue
                fields = line.split("\t")
                if len(fields) != 3:
                    raise TripleParseError(path, line_number, f"expected 3 tab-separated fields, found {len(fields)}")
                subject, relation, obj = (field.strip() for field in fields)
                if not subject or not relation or not obj:
                    raise TripleParseError(path, line_number, "empty field")
                triple = (entities.add(subject), relations.add(relation), entities.add(obj))
                if triple in seen[split]:
                    stats["duplicates"] += 1
                    logger.warning(f"⚠️ Duplicate triple dropped at {path}:{line_number} ({split.value})")
                    continue
                seen[split].add(triple)
                rows[split].append(triple)

    triples = {split: np.array(rows[split], dtype=np.int64).reshape(-1, 3) for split in Split}
    kg = KnowledgeGraph(entities, relations, triples, stats=stats)
    logger.info(f"✅ Ingested {stats['lines']} lines: {kg.summary()}")
    return kg


def add_reciprocals(kg: KnowledgeGraph) -> KnowledgeGraph:
    """Return a new graph where every triple (s, p, o) also appears as (o, p^-1, s)

    Reciprocal relation ids are original id + |R_original|; mirrored triples are
    flagged as derived in every split.
    """
    if kg.num_relations != kg.num_original_relations or any(kg.derived[split].any() for split in Split):
        raise IdempotencyError("Reciprocal relations were already added to this knowledge graph")

    offset = kg.num_original_relations
    relations = Vocabulary(kg.relations.names)
    for name in kg.relations.names:
        relations.add(name + RECIPROCAL_SUFFIX)
    if len(relations) != 2 * offset:
        raise ConfigError(f"Relation names collide with their reciprocal form ('{RECIPROCAL_SUFFIX}' suffix)")

    triples = {}
    derived = {}
    for split in Split:
        forward = kg.triples[split]
        mirrored = np.stack([forward[:, 2], forward[:, 1] + offset, forward[:, 0]], axis=1)
        triples[split] = np.concatenate([forward, mirrored], axis=0)
        derived[split] = np.concatenate([np.zeros(len(forward), dtype=bool), np.ones(len(mirrored), dtype=bool)])

    return KnowledgeGraph(
        Vocabulary(kg.entities.names),
        relations,
        triples,
        derived=derived,
        num_original_relations=offset,
        stats=kg.stats,
    )


def filtered_answers(kg: KnowledgeGraph, subject: int, relation: int, scope: Scope) -> FrozenSet[int]:
    """Objects reachable from (subject, relation) within the scope"""
    return frozenset(int(o) for o in kg.objects(subject, relation, scope))


def export_triples(kg: KnowledgeGraph, directory: str) -> List[Tuple[str, str]]:
    """Write the non-derived triples of each split back to TSV, in stored order"""
    os.makedirs(directory, exist_ok=True)
    written = []
    for split in Split:
        path = os.path.join(directory, f"{split.value}.tsv")
        keep = ~kg.derived[split]
        with open(path, "w", encoding="utf-8") as handle:
            for s, p, o in kg.triples[split][keep]:
                handle.write(f"{kg.entities.name_of(s)}\t{kg.relations.name_of(p)}\t{kg.entities.name_of(o)}\n")
        written.append((path, split.value))
    return written


# ============================================================================
# SNAPSHOTS
# ============================================================================

def _csr(index_items) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    keys = np.array([key for key, _ in index_items], dtype=np.int64).reshape(-1, 2)
    lengths = [len(values) for _, values in index_items]
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    values = (np.concatenate([values for _, values in index_items]) if index_items
              else np.zeros(0, dtype=np.int64))
    return keys, offsets, values


def save_snapshot(kg: KnowledgeGraph, path: str) -> None:
    """Write the graph as a manifest plus little-endian int32 arrays"""
    manifest = {
        "counts": kg.summary(),
        "entities": kg.entities.names,
        "relations": kg.relations.names,
        "num_original_relations": kg.num_original_relations,
        "stats": kg.stats,
    }
    arrays = []
    for split in Split:
        arrays.append((f"triples.{split.value}", kg.triples[split]))
        arrays.append((f"derived.{split.value}", kg.derived[split].astype(np.int32)))
    for scope in Scope:
        keys, offsets, values = _csr(kg.index_items(scope))
        arrays.append((f"index.{scope.value}.keys", keys))
        arrays.append((f"index.{scope.value}.offsets", offsets))
        arrays.append((f"index.{scope.value}.values", values))
    write_container(path, "kg", manifest, arrays)
    logger.info(f"✅ Knowledge graph snapshot written to {path}")


def load_snapshot(path: str) -> KnowledgeGraph:
    """Load a snapshot and check the stored indexes against the rebuilt ones"""
    manifest, arrays = read_container(path, "kg")
    try:
        kg = KnowledgeGraph(
            Vocabulary(manifest["entities"]),
            Vocabulary(manifest["relations"]),
            {split: arrays[f"triples.{split.value}"] for split in Split},
            derived={split: arrays[f"derived.{split.value}"].astype(bool) for split in Split},
            num_original_relations=manifest["num_original_relations"],
            stats=manifest.get("stats"),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: snapshot is missing {exc}")

    for scope in Scope:
        keys, offsets, values = _csr(kg.index_items(scope))
        stored = [arrays[f"index.{scope.value}.{part}"] for part in ("keys", "offsets", "values")]
        if any(a.shape != b.shape or not np.array_equal(a, b) for a, b in zip((keys, offsets, values), stored)):
            raise ShapeMismatchError(f"{path}: stored {scope.value} index does not match the stored triples")
    return kg
