#!/usr/bin/env python3
"""
Filtered MRR evaluation
Ranks every hard answer against non-answers, aggregates per query type and
renders the benchmark-style table.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from beam_search import QueryEngine
from errors import ContractViolationError, FormatError
from query_language import Anchor, EPFO_TYPES, NEGATION_TYPES, QUERY_TYPES
from query_sampler import LabeledQuery
from score_adapter import AtomScorer

logger = logging.getLogger(__name__)

HITS_AT = (1, 3, 10)


def filtered_rank(scores, target: int, exclude: Iterable[int]) -> int:
    """1 + non-answers scoring above the target, counting equal scores with a smaller id as above"""
    values = scores.detach().cpu().numpy() if isinstance(scores, torch.Tensor) else np.asarray(scores)
    exclude = set(int(e) for e in exclude)
    if target in exclude:
        raise ContractViolationError(f"Target {target} is in its own exclusion set")
    mask = np.ones(len(values), dtype=bool)
    if exclude:
        mask[np.fromiter(exclude, dtype=np.int64)] = False
    mask[target] = False
    reference = values[target]
    ids = np.arange(len(values))
    above = (values > reference) | ((values == reference) & (ids < target))
    return 1 + int(np.count_nonzero(above & mask))


@dataclass
class QueryOutcome:
    query_type: str
    ranks: List[int]

    @property
    def reciprocal(self) -> float:
        return float(np.mean([1.0 / r for r in self.ranks]))

    def hits(self, k: int) -> float:
        return float(np.mean([r <= k for r in self.ranks]))


def rank_query(engine: QueryEngine, query: LabeledQuery) -> Optional[QueryOutcome]:
    if not query.hard:
        logger.warning(f"⚠️ Skipping {query.query_type} query without hard answers")
        return None
    scores = engine.answer(query.graph, trace=False).scores
    known = query.answers
    ranks = [filtered_rank(scores, h, known - {h}) for h in sorted(query.hard)]
    return QueryOutcome(query.query_type, ranks)


# ============================================================================
# REPORT
# ============================================================================

@dataclass
class EvalReport:
    per_type: Dict[str, float]
    counts: Dict[str, int]
    avg_p: Optional[float]
    avg_n: Optional[float]
    hits: Dict[str, Dict[str, float]] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    skipped: int = 0

    @property
    def mean_mrr(self) -> float:
        """Unweighted mean over the evaluated types"""
        return float(np.mean(list(self.per_type.values()))) if self.per_type else math.nan


def _average(per_type: Dict[str, float], types: Sequence[str]) -> Optional[float]:
    values = [per_type[t] for t in types if t in per_type]
    return float(np.mean(values)) if values else None


def summarize(outcomes: Sequence[Optional[QueryOutcome]], config: Optional[Dict[str, Any]] = None) -> EvalReport:
    """Per-type means in a fixed type order"""
    grouped: Dict[str, List[QueryOutcome]] = {}
    for outcome in outcomes:
        if outcome is not None:
            grouped.setdefault(outcome.query_type, []).append(outcome)
    order = [t for t in QUERY_TYPES if t in grouped] + sorted(t for t in grouped if t not in QUERY_TYPES)

    per_type = {t: float(np.mean([o.reciprocal for o in grouped[t]])) for t in order}
    hits = {t: {f"hits@{k}": float(np.mean([o.hits(k) for o in grouped[t]])) for k in HITS_AT} for t in order}
    return EvalReport(
        per_type=per_type,
        counts={t: len(grouped[t]) for t in order},
        avg_p=_average(per_type, EPFO_TYPES),
        avg_n=_average(per_type, NEGATION_TYPES),
        hits=hits,
        config=dict(config or {}),
        skipped=sum(1 for outcome in outcomes if outcome is None),
    )


def evaluate(
    engine: QueryEngine,
    queries: Sequence[LabeledQuery],
    threads: int = 1,
    diagnostics: bool = False,
) -> EvalReport:
    """Filtered MRR of hard answers over beam-search score vectors"""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            outcomes = list(executor.map(lambda q: rank_query(engine, q), queries))
    else:
        outcomes = [rank_query(engine, q) for q in queries]

    config = {
        "k": engine.k,
        "tnorm": engine.sem.tnorm.value,
        "negation": engine.sem.negation.value,
        "normalization": engine.lp.normalization,
        "adapter": engine.adapter.describe() if engine.adapter is not None else None,
    }
    report = summarize(outcomes, config)
    if diagnostics:
        report.diagnostics = score_distribution(engine.scorer(), queries)
    if report.skipped:
        logger.warning(f"⚠️ {report.skipped} queries had no hard answers and were skipped")
    logger.info(f"📊 Evaluated {sum(report.counts.values())} queries: avg_p={report.avg_p} avg_n={report.avg_n}")
    return report


def score_distribution(scorer: AtomScorer, queries: Sequence[LabeledQuery]) -> Dict[str, Dict[str, float]]:
    """Variance and range of atom scores before and after calibration

    Covers every anchored atom of the queries, scored against all entities.
    """
    pairs = sorted({(atom.arg1.entity, atom.predicate) for q in queries for atom in q.graph.atoms
                    if isinstance(atom.arg1, Anchor)})
    if not pairs:
        return {}
    with torch.no_grad():
        stages = scorer.stages(torch.tensor([s for s, _ in pairs]), torch.tensor([p for _, p in pairs]))
    summary = {}
    for name in ("raw", "normalized", "calibrated", "clamped"):
        values = getattr(stages, name).detach().cpu().numpy().astype(np.float64).ravel()
        summary[name] = {
            "variance": float(values.var()),
            "min": float(values.min()),
            "max": float(values.max()),
        }
    return summary


# ============================================================================
# RENDERING
# ============================================================================

def format_table(report: EvalReport) -> str:
    """Aligned MRR table (x100) in benchmark column order"""
    def percent(value: Optional[float]) -> str:
        return "-" if value is None else f"{value * 100:.1f}"

    columns = [t for t in QUERY_TYPES if t in report.per_type]
    row = {t: percent(report.per_type[t]) for t in columns}
    row.update(avg_p=percent(report.avg_p), avg_n=percent(report.avg_n))
    counts = {t: str(report.counts[t]) for t in columns}
    counts.update(avg_p="", avg_n="")
    frame = pd.DataFrame([row, counts], index=["MRR", "queries"], columns=columns + ["avg_p", "avg_n"])
    text = frame.to_string()
    if report.diagnostics:
        stats = pd.DataFrame(report.diagnostics).T[["variance", "min", "max"]]
        text += "\n\nscore distribution\n" + stats.to_string(float_format=lambda v: f"{v:.4f}")
    return text


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def report_to_dict(report: EvalReport) -> Dict[str, Any]:
    return _json_safe(asdict(report))


def report_from_dict(data: Dict[str, Any]) -> EvalReport:
    try:
        return EvalReport(
            per_type={k: float(v) for k, v in data["per_type"].items()},
            counts={k: int(v) for k, v in data["counts"].items()},
            avg_p=data.get("avg_p"),
            avg_n=data.get("avg_n"),
            hits=data.get("hits", {}),
            config=data.get("config", {}),
            diagnostics=data.get("diagnostics", {}),
            skipped=int(data.get("skipped", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"Not an evaluation report: {exc}")


def write_report(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(report_to_dict(report), handle, sort_keys=True, indent=2)
        handle.write("\n")
    logger.info(f"✅ Report written to {path}")


def read_report(path: str) -> EvalReport:
    with open(path, "r", encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}")
    return report_from_dict(data)
