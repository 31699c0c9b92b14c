#!/usr/bin/env python3
"""
ComplEx link predictor with N3 regularisation
Scores single triples, is trained with a 1-vs-all (or BCE) loss under Adagrad,
maps scores into [0, 1] and checkpoints to the shared container format.
"""

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigError, DimensionMismatchError, ShapeMismatchError, TrainingDivergedError
from knowledge_graph import KnowledgeGraph, Split
from snapshot_io import read_container, write_container
from training_monitor import TrainingMonitor, monitor_or_default

logger = logging.getLogger(__name__)


class Normalization(str, Enum):
    SIGMOID = "sigmoid"
    MINMAX = "minmax"


class LossKind(str, Enum):
    ONE_VS_ALL = "1vsall"
    BCE = "bce"


@dataclass
class LpTrainConfig:
    """Link predictor training settings"""
    dim: int = 1000
    learning_rate: float = 0.1
    steps: int = 50000
    batch_size: int = 1000
    n3_weight: float = 0.05
    seed: int = 0
    loss: str = LossKind.ONE_VS_ALL.value
    init_scale: float = 1e-3
    normalization: str = Normalization.SIGMOID.value
    log_every: int = 100

    def validate(self) -> None:
        errors = []
        for name in ("dim", "steps", "batch_size", "log_every"):
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be positive")
        if not self.learning_rate > 0 or not self.init_scale > 0:
            errors.append("learning_rate and init_scale must be positive")
        if self.n3_weight < 0:
            errors.append("n3_weight must be non-negative")
        if self.loss not in {kind.value for kind in LossKind}:
            errors.append(f"unknown loss '{self.loss}'")
        if self.normalization not in {kind.value for kind in Normalization}:
            errors.append(f"unknown normalization '{self.normalization}'")
        if errors:
            raise ConfigError(f"Configuration validation failed: {'; '.join(errors)}")


# ============================================================================
# SCORING
# ============================================================================

def _split(x: torch.Tensor):
    half = x.shape[-1] // 2
    return x[..., :half], x[..., half:]


def complex_score(e_s: torch.Tensor, w_p: torch.Tensor, e_o: torch.Tensor) -> torch.Tensor:
    """Re(sum_k e_s[k] * w_p[k] * conj(e_o[k]))

    Accepts complex tensors or real tensors laid out as [real parts, imaginary parts].
    """
    if e_s.shape[-1] != w_p.shape[-1] or e_s.shape[-1] != e_o.shape[-1]:
        raise DimensionMismatchError(
            f"Embedding sizes differ: {e_s.shape[-1]}, {w_p.shape[-1]}, {e_o.shape[-1]}"
        )
    if torch.is_complex(e_s) or torch.is_complex(w_p) or torch.is_complex(e_o):
        return torch.real((e_s * w_p * torch.conj(e_o)).sum(dim=-1))
    if e_s.shape[-1] % 2:
        raise DimensionMismatchError(f"Real layout needs an even size, got {e_s.shape[-1]}")
    s_re, s_im = _split(e_s)
    p_re, p_im = _split(w_p)
    o_re, o_im = _split(e_o)
    lhs_re = s_re * p_re - s_im * p_im
    lhs_im = s_re * p_im + s_im * p_re
    return (lhs_re * o_re + lhs_im * o_im).sum(dim=-1)


def n3_penalty(e_s: torch.Tensor, w_p: torch.Tensor, e_o: torch.Tensor) -> torch.Tensor:
    """Sum of cubed complex moduli of the three factors, averaged over the batch"""
    if e_s.numel() == 0:
        return e_s.new_zeros(())
    batch = e_s.shape[0] if e_s.dim() > 1 else 1
    total = e_s.new_zeros(())
    for factor in (e_s, w_p, e_o):
        re, im = _split(factor)
        total = total + (re ** 2 + im ** 2).pow(1.5).sum()
    return total / batch


def normalize_scores(scores: torch.Tensor, method: str) -> torch.Tensor:
    """Map raw scores into [0, 1] along the last dimension"""
    method = Normalization(method)
    if method is Normalization.SIGMOID:
        return torch.sigmoid(scores)
    # min and max are constants for the gradient
    low = scores.detach().amin(dim=-1, keepdim=True)
    high = scores.detach().amax(dim=-1, keepdim=True)
    span = high - low
    flat = span <= 0
    scaled = (scores - low) / torch.where(flat, torch.ones_like(span), span)
    return torch.where(flat, torch.full_like(scores, 0.5), scaled)


class EmbeddingTable(nn.Module):
    """Entity and relation embeddings of a ComplEx model (2d reals per vector)"""

    def __init__(
        self,
        num_entities: int,
        num_relations: int,
        dim: int,
        init_scale: float = 1e-3,
        seed: int = 0,
        normalization: str = Normalization.SIGMOID.value,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.dim = int(dim)
        self.seed = int(seed)
        self.normalization = Normalization(normalization).value
        self.entity = nn.Embedding(num_entities, 2 * self.dim, dtype=dtype)
        self.relation = nn.Embedding(num_relations, 2 * self.dim, dtype=dtype)

        generator = torch.Generator().manual_seed(self.seed)
        with torch.no_grad():
            for table in (self.entity, self.relation):
                table.weight.copy_(torch.randn(table.weight.shape, generator=generator, dtype=dtype) * init_scale)

    @property
    def num_entities(self) -> int:
        return self.entity.num_embeddings

    @property
    def num_relations(self) -> int:
        return self.relation.num_embeddings

    @classmethod
    def from_arrays(cls, entities, relations, seed: int = 0, normalization: str = "sigmoid",
                    dtype: torch.dtype = torch.float32) -> "EmbeddingTable":
        entities = torch.as_tensor(np.asarray(entities), dtype=dtype)
        relations = torch.as_tensor(np.asarray(relations), dtype=dtype)
        if entities.shape[1] != relations.shape[1] or entities.shape[1] % 2:
            raise ShapeMismatchError(f"Incompatible embedding widths {entities.shape[1]} and {relations.shape[1]}")
        table = cls(entities.shape[0], relations.shape[0], entities.shape[1] // 2, seed=seed,
                    normalization=normalization, dtype=dtype)
        with torch.no_grad():
            table.entity.weight.copy_(entities)
            table.relation.weight.copy_(relations)
        return table

    def score_triples(self, subjects: torch.Tensor, relations: torch.Tensor, objects: torch.Tensor) -> torch.Tensor:
        return complex_score(self.entity(subjects), self.relation(relations), self.entity(objects))

    def score_all_objects(self, subjects: torch.Tensor, relations: torch.Tensor) -> torch.Tensor:
        """(B,) subjects and relations -> (B, |E|) raw scores against every object"""
        return self.score_from_embeddings(self.entity(subjects), self.relation(relations))

    def score_from_embeddings(self, e_s: torch.Tensor, w_p: torch.Tensor) -> torch.Tensor:
        s_re, s_im = _split(e_s)
        p_re, p_im = _split(w_p)
        o_re, o_im = _split(self.entity.weight)
        lhs_re = s_re * p_re - s_im * p_im
        lhs_im = s_re * p_im + s_im * p_re
        return lhs_re @ o_re.transpose(0, 1) + lhs_im @ o_im.transpose(0, 1)

    def describe(self) -> dict:
        return {
            "model": "complex",
            "dim": self.dim,
            "num_entities": self.num_entities,
            "num_relations": self.num_relations,
            "seed": self.seed,
            "normalization": self.normalization,
        }


def score_all_objects(table: EmbeddingTable, subject: int, relation: int) -> torch.Tensor:
    """Raw scores of (subject, relation, o) for every entity o"""
    with torch.no_grad():
        return table.score_all_objects(torch.tensor([subject]), torch.tensor([relation]))[0]


# ============================================================================
# TRAINING
# ============================================================================

def lp_loss(table: EmbeddingTable, batch: torch.Tensor, config: LpTrainConfig,
            generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Mean per-triple loss plus the weighted N3 penalty"""
    subjects, relations, objects = batch[:, 0], batch[:, 1], batch[:, 2]
    e_s, w_p, e_o = table.entity(subjects), table.relation(relations), table.entity(objects)
    if config.loss == LossKind.ONE_VS_ALL.value:
        scores = table.score_from_embeddings(e_s, w_p)
        fit = F.cross_entropy(scores, objects)
    else:
        negatives = torch.randint(table.num_entities, objects.shape, generator=generator)
        positive = complex_score(e_s, w_p, e_o)
        negative = complex_score(e_s, w_p, table.entity(negatives))
        fit = (F.softplus(-positive) + F.softplus(negative)).mean()
    return fit + config.n3_weight * n3_penalty(e_s, w_p, e_o)


def train_lp(kg: KnowledgeGraph, config: LpTrainConfig, monitor: Optional[TrainingMonitor] = None) -> EmbeddingTable:
    """Train a ComplEx table on the training split (forward and reciprocal triples jointly)"""
    config.validate()
    if not kg.has_reciprocals:
        raise ConfigError("Link predictor training needs reciprocal relations (run add_reciprocals first)")
    triples = torch.as_tensor(kg.triples[Split.TRAIN], dtype=torch.long)
    if len(triples) == 0:
        raise ConfigError("The training split is empty")

    monitor = monitor_or_default(monitor, "link-predictor", config.log_every)
    generator = torch.Generator().manual_seed(config.seed)
    table = EmbeddingTable(kg.num_entities, kg.num_relations, config.dim, init_scale=config.init_scale,
                           seed=config.seed, normalization=config.normalization)
    optimizer = torch.optim.Adagrad(table.parameters(), lr=config.learning_rate,
                                    initial_accumulator_value=0.0, eps=1e-10)
    logger.info(f"🚀 Training link predictor on {len(triples)} triples: {asdict(config)}")

    order = torch.randperm(len(triples), generator=generator)
    position = 0
    for step in range(1, config.steps + 1):
        if position >= len(triples):
            order = torch.randperm(len(triples), generator=generator)
            position = 0
        batch = triples[order[position:position + config.batch_size]]
        position += config.batch_size

        loss = lp_loss(table, batch, config, generator)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                "Link predictor loss is not finite",
                {
                    "step": step,
                    "recent_losses": monitor.recent(),
                    "entity_norm": float(table.entity.weight.detach().norm()),
                    "relation_norm": float(table.relation.weight.detach().norm()),
                },
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        monitor.record_step(step, loss.item())

    logger.info(f"✅ Link predictor trained: {monitor.get_training_report()['final_loss']}")
    return table


def hits_at(table: EmbeddingTable, triples: np.ndarray, k: int = 1, kg: Optional[KnowledgeGraph] = None) -> float:
    """Hits@k of the true object; other known objects are filtered out when kg is given"""
    if len(triples) == 0:
        return math.nan
    batch = torch.as_tensor(np.asarray(triples), dtype=torch.long)
    with torch.no_grad():
        scores = table.score_all_objects(batch[:, 0], batch[:, 1])
    if kg is not None:
        for row, (s, p, o) in enumerate(batch.tolist()):
            known = [x for x in kg.objects(s, p).tolist() if x != o]
            scores[row, known] = -math.inf
    target = scores.gather(1, batch[:, 2:3])
    higher = (scores > target).sum(dim=1)
    return float((higher < k).double().mean())


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_checkpoint(table: EmbeddingTable, path: str, adapter=None) -> None:
    """Write embeddings (and optionally an adapter) as float32 arrays"""
    manifest = table.describe()
    arrays = [
        ("entities", table.entity.weight.detach().cpu().numpy().astype(np.float32)),
        ("relations", table.relation.weight.detach().cpu().numpy().astype(np.float32)),
    ]
    if adapter is not None:
        manifest["adapter"] = adapter.describe()
        arrays.extend(adapter.named_arrays())
    write_container(path, "checkpoint", manifest, arrays)
    logger.info(f"✅ Checkpoint written to {path}")


def load_checkpoint(path: str) -> EmbeddingTable:
    manifest, arrays = read_container(path, "checkpoint")
    dim = int(manifest["dim"])
    expected = {
        "entities": (int(manifest["num_entities"]), 2 * dim),
        "relations": (int(manifest["num_relations"]), 2 * dim),
    }
    for name, shape in expected.items():
        if name not in arrays or arrays[name].shape != shape:
            found = arrays[name].shape if name in arrays else None
            raise ShapeMismatchError(f"{path}: '{name}' should have shape {shape}, found {found}")
    return EmbeddingTable.from_arrays(
        arrays["entities"], arrays["relations"], seed=manifest.get("seed", 0),
        normalization=manifest.get("normalization", "sigmoid"),
    )
