#!/usr/bin/env python3
"""
Score calibration layer
An affine map score * (1 + alpha) + beta whose parameters come from a small
network conditioned on the embeddings of the atom, trained on complex queries
whose answers need no intermediate bindings.
"""

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import BudgetExceededError, ConfigError, DimensionMismatchError, ShapeMismatchError, TrainingDivergedError
from fuzzy_logic import FuzzySemantics, negation, tconorm_fold, tnorm
from link_predictor import EmbeddingTable, LossKind, normalize_scores
from query_language import TEMPLATES, TRAINING_TYPES, Anchor, QueryGraph, Var, plan_disjunct
from query_sampler import LabeledQuery
from snapshot_io import read_container
from training_monitor import TrainingMonitor, monitor_or_default

logger = logging.getLogger(__name__)

DEFAULT_ENUM_BUDGET = 1_000_000


class ConditioningMode(str, Enum):
    """Embeddings the calibration parameters are conditioned on"""
    GLOBAL = "global"
    PREDICATE = "predicate"
    SUBJECT_PREDICATE = "subject-predicate"
    FULL = "full"


CONDITION_ALIASES = {
    "global": ConditioningMode.GLOBAL,
    "pred": ConditioningMode.PREDICATE,
    "predicate": ConditioningMode.PREDICATE,
    "subjpred": ConditioningMode.SUBJECT_PREDICATE,
    "subject-predicate": ConditioningMode.SUBJECT_PREDICATE,
    "full": ConditioningMode.FULL,
}

# how many embedding blocks feed the network, in [e_s, e_p, e_o] order
_INPUT_BLOCKS = {
    ConditioningMode.GLOBAL: (),
    ConditioningMode.PREDICATE: ("p",),
    ConditioningMode.SUBJECT_PREDICATE: ("s", "p"),
    ConditioningMode.FULL: ("s", "p", "o"),
}

# softplus(_MONOTONE_SHIFT) is 1, and subtracting it in the same dtype keeps a zero head at alpha == 0
_MONOTONE_SHIFT = math.log(math.e - 1.0)


def resolve_condition(name: str) -> ConditioningMode:
    try:
        return CONDITION_ALIASES[str(name).lower()]
    except KeyError:
        raise ConfigError(f"Unknown conditioning mode '{name}' (expected one of {sorted(CONDITION_ALIASES)})")


@dataclass
class AdapterTrainConfig:
    """Adapter training settings"""
    training_types: Tuple[str, ...] = TRAINING_TYPES
    steps: int = 1000
    learning_rate: float = 0.1
    batch_size: int = 256
    loss: str = LossKind.ONE_VS_ALL.value
    condition: str = "predicate"
    psi_layers: int = 1
    psi_hidden: Optional[int] = None
    unfreeze_lp: bool = False
    monotone: bool = False
    train_fraction: float = 1.0
    eval_every: int = 0
    seed: int = 0
    log_every: int = 100

    def validate(self) -> None:
        errors = []
        for name in ("steps", "batch_size", "log_every"):
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be positive")
        if not self.learning_rate > 0:
            errors.append("learning_rate must be positive")
        if self.loss not in {kind.value for kind in LossKind}:
            errors.append(f"unknown loss '{self.loss}'")
        if self.psi_layers not in (1, 2):
            errors.append("psi_layers must be 1 or 2")
        if self.psi_hidden is not None and self.psi_hidden <= 0:
            errors.append("psi_hidden must be positive")
        if not 0 < self.train_fraction <= 1:
            errors.append("train_fraction must be in (0, 1]")
        if self.eval_every < 0:
            errors.append("eval_every must be non-negative")
        for query_type in self.training_types:
            if query_type not in TEMPLATES:
                errors.append(f"unknown training query type '{query_type}'")
            elif TEMPLATES[query_type][0] != 1:
                errors.append(f"training query type '{query_type}' has existential variables")
        if not self.training_types:
            errors.append("at least one training query type is needed")
        if self.condition.lower() not in CONDITION_ALIASES:
            errors.append(f"unknown conditioning mode '{self.condition}'")
        if errors:
            raise ConfigError(f"Configuration validation failed: {'; '.join(errors)}")


# ============================================================================
# CALIBRATION NETWORK
# ============================================================================

class ScoreAdapter(nn.Module):
    """Network producing (alpha, beta) from atom embeddings; zero output at init"""

    def __init__(
        self,
        dim: int,
        condition: str = "predicate",
        psi_layers: int = 1,
        hidden: Optional[int] = None,
        monotone: bool = False,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.dim = int(dim)
        self.mode = resolve_condition(condition)
        self.psi_layers = int(psi_layers)
        self.hidden = int(hidden) if hidden else max(1, self.dim // 2)
        self.monotone = bool(monotone)
        self.seed = int(seed)
        if self.psi_layers not in (1, 2):
            raise ConfigError("psi_layers must be 1 or 2")

        blocks = _INPUT_BLOCKS[self.mode]
        if not blocks:
            self.constants = nn.Parameter(torch.zeros(2, dtype=dtype))
            return

        width = 2 * self.dim * len(blocks)
        if self.psi_layers == 1:
            self.first = nn.Linear(width, 2, dtype=dtype)
            nn.init.zeros_(self.first.weight)
            nn.init.zeros_(self.first.bias)
        else:
            self.first = nn.Linear(width, self.hidden, dtype=dtype)
            bound = 1.0 / math.sqrt(width)
            generator = torch.Generator().manual_seed(self.seed)
            with torch.no_grad():
                self.first.weight.copy_((torch.rand(self.first.weight.shape, generator=generator, dtype=dtype) * 2 - 1) * bound)
                self.first.bias.copy_((torch.rand(self.first.bias.shape, generator=generator, dtype=dtype) * 2 - 1) * bound)
            self.head = nn.Linear(self.hidden, 2, dtype=dtype)
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check(self, name: str, x: torch.Tensor) -> None:
        if x.shape[-1] != 2 * self.dim:
            raise DimensionMismatchError(f"{name} embedding has width {x.shape[-1]}, adapter expects {2 * self.dim}")

    def theta(self, e_s: torch.Tensor, e_p: torch.Tensor, e_o: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Calibration parameters for broadcastable embedding tensors

        Shapes follow broadcasting of e_s and e_p (e.g. (B, 1, 2d)) against
        e_o (e.g. (1, E, 2d)); the result drops the embedding axis.
        """
        blocks = _INPUT_BLOCKS[self.mode]
        if not blocks:
            raw = self.constants
        else:
            inputs = {"s": e_s, "p": e_p, "o": e_o}
            weight, out = self.first.weight, self.first.bias
            start = 0
            for name in blocks:
                x = inputs[name]
                self._check(name, x)
                out = out + x @ weight[:, start:start + x.shape[-1]].transpose(0, 1)
                start += x.shape[-1]
            raw = self.head(torch.relu(out)) if self.psi_layers == 2 else out

        alpha, beta = raw[..., 0], raw[..., 1]
        if self.monotone:
            shift = torch.full_like(alpha, _MONOTONE_SHIFT)
            alpha = F.softplus(alpha + shift) - F.softplus(shift)
        return alpha, beta

    def describe(self) -> dict:
        return {
            "condition": self.mode.value,
            "dim": self.dim,
            "psi_layers": self.psi_layers,
            "hidden": self.hidden,
            "monotone": self.monotone,
            "seed": self.seed,
            "parameters": self.num_parameters(),
        }

    def named_arrays(self) -> List[Tuple[str, np.ndarray]]:
        return [(f"adapter.{name}", p.detach().cpu().numpy().astype(np.float32)) for name, p in self.named_parameters()]


def compute_theta(adapter: ScoreAdapter, e_s: torch.Tensor, e_p: torch.Tensor, e_o: torch.Tensor) -> Tuple[float, float]:
    """(alpha, beta) for a single atom"""
    with torch.no_grad():
        alpha, beta = adapter.theta(e_s.reshape(1, -1), e_p.reshape(1, -1), e_o.reshape(1, -1))
    return float(alpha.reshape(-1)[0]), float(beta.reshape(-1)[0])


def calibrate(score, alpha, beta):
    """Affine calibration before clamping: score * (1 + alpha) + beta"""
    return score * (1.0 + alpha) + beta


def load_adapter(path: str) -> Optional[ScoreAdapter]:
    """Adapter stored alongside a checkpoint, or None when there is none"""
    manifest, arrays = read_container(path, "checkpoint")
    settings = manifest.get("adapter")
    if not settings:
        return None
    if int(settings["dim"]) != int(manifest["dim"]):
        raise ShapeMismatchError(f"{path}: adapter dim {settings['dim']} differs from embedding dim {manifest['dim']}")
    adapter = ScoreAdapter(
        settings["dim"],
        condition=settings["condition"],
        psi_layers=settings["psi_layers"],
        hidden=settings["hidden"],
        monotone=settings["monotone"],
        seed=settings.get("seed", 0),
    )
    with torch.no_grad():
        for name, parameter in adapter.named_parameters():
            stored = arrays.get(f"adapter.{name}")
            if stored is None or tuple(stored.shape) != tuple(parameter.shape):
                found = None if stored is None else tuple(stored.shape)
                raise ShapeMismatchError(f"{path}: adapter.{name} should have shape {tuple(parameter.shape)}, found {found}")
            parameter.copy_(torch.as_tensor(stored))
    return adapter


# ============================================================================
# ATOM SCORING PIPELINE
# ============================================================================

class AtomStages(NamedTuple):
    raw: torch.Tensor
    normalized: torch.Tensor
    calibrated: torch.Tensor   # before clamping
    clamped: torch.Tensor


class AtomScorer:
    """raw score -> normalization -> calibration -> clamp to [0, 1] -> optional negation

    vector() results are cached per (subject, predicate, negated) for the life
    of the scorer, so every consumer of one query sees identical numbers.
    """

    def __init__(self, lp: EmbeddingTable, adapter: Optional[ScoreAdapter], sem: FuzzySemantics):
        self.lp = lp
        self.adapter = adapter
        self.sem = sem
        self._cache: Dict[Tuple[int, int, bool], torch.Tensor] = {}

    @property
    def num_entities(self) -> int:
        return self.lp.num_entities

    def stages(self, subjects: torch.Tensor, predicates: torch.Tensor) -> AtomStages:
        """Differentiable scores of (subjects[i], predicates[i], o) for every entity o"""
        e_s = self.lp.entity(subjects)
        e_p = self.lp.relation(predicates)
        raw = self.lp.score_from_embeddings(e_s, e_p)
        normalized = normalize_scores(raw, self.lp.normalization)
        if self.adapter is None:
            calibrated = normalized
        else:
            # alpha/beta come back as (), (B, 1) or (B, E) and broadcast against (B, E)
            alpha, beta = self.adapter.theta(e_s.unsqueeze(1), e_p.unsqueeze(1), self.lp.entity.weight.unsqueeze(0))
            calibrated = calibrate(normalized, alpha, beta)
        return AtomStages(raw, normalized, calibrated, calibrated.clamp(0.0, 1.0))

    def vector(self, subject: int, predicate: int, negated: bool = False) -> torch.Tensor:
        key = (int(subject), int(predicate), bool(negated))
        cached = self._cache.get(key)
        if cached is None:
            with torch.no_grad():
                scores = self.stages(torch.tensor([key[0]]), torch.tensor([key[1]])).clamped[0]
            cached = negation(self.sem, scores) if negated else scores
            self._cache[key] = cached
        return cached

    def atom_value(self, atom, bindings: Dict[int, int]) -> float:
        subject = atom.arg1.entity if isinstance(atom.arg1, Anchor) else bindings[atom.arg1.index]
        return self.vector(subject, atom.predicate, atom.negated)[bindings[atom.arg2.index]]


# ============================================================================
# EXACT ANSWER SCORES
# ============================================================================

def _disjunct_scores_exact(scorer: AtomScorer, disjunct, budget: int, kg=None) -> torch.Tensor:
    """max over all substitutions of one branch, for every target entity"""
    plan = plan_disjunct(disjunct, kg)
    count = scorer.num_entities
    axes = {step.var: axis for axis, step in enumerate(plan)}
    if count ** len(plan) > budget:
        raise BudgetExceededError(
            f"Enumerating {count}^{len(plan)} substitutions exceeds the budget of {budget}"
        )

    rank = len(plan)
    partial = None
    for step in plan:
        for atom in step.atoms:
            shape = [1] * rank
            shape[axes[step.var]] = count
            if isinstance(atom.arg1, Anchor):
                values = scorer.vector(atom.arg1.entity, atom.predicate, atom.negated).reshape(shape)
            else:
                shape[axes[atom.arg1.index]] = count
                matrix = torch.stack([scorer.vector(u, atom.predicate, atom.negated) for u in range(count)])
                if axes[atom.arg1.index] > axes[step.var]:
                    matrix = matrix.transpose(0, 1)
                values = matrix.reshape(shape)
            partial = values if partial is None else tnorm(scorer.sem, partial, values)

    partial = partial.expand([count] * rank)
    target_axis = axes[0]
    others = [axis for axis in range(rank) if axis != target_axis]
    if others:
        partial = partial.permute(others + [target_axis]).reshape(-1, count).amax(dim=0)
    return partial


def exact_answer_scores(scorer: AtomScorer, query: QueryGraph, budget: int = DEFAULT_ENUM_BUDGET,
                        kg=None) -> torch.Tensor:
    """Exact query score of every candidate answer (max over substitutions per branch)"""
    with torch.no_grad():
        branches = [_disjunct_scores_exact(scorer, disjunct, budget, kg) for disjunct in query.disjuncts]
    return tconorm_fold(scorer.sem, branches)


def answer_score_exact(lp: EmbeddingTable, adapter: Optional[ScoreAdapter], sem: FuzzySemantics,
                       query: QueryGraph, candidate: int, budget: int = DEFAULT_ENUM_BUDGET) -> float:
    """Exact score of one candidate answer"""
    scorer = AtomScorer(lp, adapter, sem)
    return float(exact_answer_scores(scorer, query, budget)[candidate])


# ============================================================================
# TRAINING
# ============================================================================

class _ReturningClamp(torch.autograd.Function):
    """Clamp to [0, 1]; a saturated entry only passes gradients that move it back into range"""

    @staticmethod
    def forward(ctx, calibrated: torch.Tensor) -> torch.Tensor:
        ctx.save_for_backward(calibrated)
        return calibrated.clamp(0.0, 1.0)

    @staticmethod
    def backward(ctx, grad: torch.Tensor) -> torch.Tensor:
        (calibrated,) = ctx.saved_tensors
        # a descent step moves against grad
        keep = ((calibrated >= 0.0) & (calibrated <= 1.0)) | ((calibrated > 1.0) & (grad > 0)) | ((calibrated < 0.0) & (grad < 0))
        return torch.where(keep, grad, torch.zeros_like(grad))


def _anchored_scores(scorer: AtomScorer, query: QueryGraph) -> torch.Tensor:
    """Differentiable (E,) query scores for queries whose atoms all start at anchors

    Forward values equal the inference scores. Atoms calibrated past the
    clamp still get pushed back towards [0, 1], so training cannot stall there.
    """
    branches = []
    for disjunct in query.disjuncts:
        if any(not isinstance(atom.arg1, Anchor) or atom.arg2 != Var(0) for atom in disjunct):
            raise ConfigError("Adapter training needs queries without existential variables")
        ordered = plan_disjunct(disjunct)[0].atoms
        stages = scorer.stages(
            torch.tensor([atom.arg1.entity for atom in ordered]),
            torch.tensor([atom.predicate for atom in ordered]),
        )
        score = None
        for row, atom in enumerate(ordered):
            value = _ReturningClamp.apply(stages.calibrated[row])
            if atom.negated:
                value = negation(scorer.sem, value)
            score = value if score is None else tnorm(scorer.sem, score, value)
        branches.append(score)
    return tconorm_fold(scorer.sem, branches)


def query_loss(
    lp: EmbeddingTable,
    adapter: Optional[ScoreAdapter],
    sem: FuzzySemantics,
    batch: Sequence[Tuple[QueryGraph, int]],
    loss: str = LossKind.ONE_VS_ALL.value,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Mean loss of (query, answer) pairs"""
    scorer = AtomScorer(lp, adapter, sem)
    scores = torch.stack([_anchored_scores(scorer, graph) for graph, _ in batch])
    answers = torch.tensor([answer for _, answer in batch])
    if loss == LossKind.ONE_VS_ALL.value:
        return (torch.logsumexp(scores, dim=1) - scores.gather(1, answers[:, None])[:, 0]).mean()
    negatives = torch.randint(scores.shape[1], answers.shape, generator=generator)
    eps = 1e-7
    positive = scores.gather(1, answers[:, None])[:, 0].clamp(eps, 1 - eps)
    negative = scores.gather(1, negatives[:, None])[:, 0].clamp(eps, 1 - eps)
    return (-torch.log(positive) - torch.log(1 - negative)).mean()


def adapter_gradients(
    lp: EmbeddingTable,
    adapter: ScoreAdapter,
    sem: FuzzySemantics,
    batch: Sequence[Tuple[QueryGraph, int]],
    loss: str = LossKind.ONE_VS_ALL.value,
    unfreeze_lp: bool = False,
    generator: Optional[torch.Generator] = None,
) -> Dict[str, torch.Tensor]:
    """Gradients of the mean batch loss, keyed like the parameters they belong to"""
    named = [(f"adapter.{name}", p) for name, p in adapter.named_parameters()]
    if unfreeze_lp:
        named += [(f"lp.{name}", p) for name, p in lp.named_parameters()]
    value = query_loss(lp, adapter, sem, batch, loss, generator)
    grads = torch.autograd.grad(value, [p for _, p in named], allow_unused=True)
    return {
        name: (grad if grad is not None else torch.zeros_like(p))
        for (name, p), grad in zip(named, grads)
    }


def _training_pairs(queries: Sequence[LabeledQuery], config: AdapterTrainConfig) -> List[Tuple[QueryGraph, int]]:
    kept = [q for q in queries if q.query_type in config.training_types]
    if not kept:
        raise ConfigError(f"No training queries of types {', '.join(config.training_types)}")
    if config.train_fraction < 1.0:
        rng = np.random.default_rng(config.seed)
        size = max(1, int(math.ceil(config.train_fraction * len(kept))))
        chosen = np.sort(rng.permutation(len(kept))[:size])
        kept = [kept[i] for i in chosen]
        logger.info(f"📊 Training on {size} queries ({config.train_fraction:.2%} of the pool)")
    pairs = [(q.graph, answer) for q in kept for answer in sorted(q.answers)]
    if not pairs:
        raise ConfigError("Training queries carry no answers")
    return pairs


def train_adapter(
    lp: EmbeddingTable,
    queries: Sequence[LabeledQuery],
    config: AdapterTrainConfig,
    sem: FuzzySemantics,
    monitor: Optional[TrainingMonitor] = None,
    validate_fn: Optional[Callable[[ScoreAdapter], float]] = None,
) -> ScoreAdapter:
    """Fit the calibration network on (query, answer) pairs

    The link predictor stays frozen unless config.unfreeze_lp is set, in which
    case its embeddings are updated in place alongside the adapter.
    """
    config.validate()
    pairs = _training_pairs(queries, config)
    monitor = monitor_or_default(monitor, "adapter", config.log_every)
    generator = torch.Generator().manual_seed(config.seed)

    adapter = ScoreAdapter(
        lp.dim,
        condition=config.condition,
        psi_layers=config.psi_layers,
        hidden=config.psi_hidden,
        monotone=config.monotone,
        seed=config.seed,
        dtype=lp.entity.weight.dtype,
    )
    parameters = list(adapter.parameters())
    lp.requires_grad_(config.unfreeze_lp)
    if config.unfreeze_lp:
        parameters += list(lp.parameters())
    optimizer = torch.optim.Adagrad(parameters, lr=config.learning_rate, initial_accumulator_value=0.0, eps=1e-10)
    logger.info(
        f"🚀 Training adapter on {len(pairs)} (query, answer) pairs, "
        f"{adapter.num_parameters()} parameters: {asdict(config)}"
    )

    try:
        order = torch.randperm(len(pairs), generator=generator)
        position = 0
        for step in range(1, config.steps + 1):
            if position >= len(pairs):
                order = torch.randperm(len(pairs), generator=generator)
                position = 0
            batch = [pairs[i] for i in order[position:position + config.batch_size].tolist()]
            position += config.batch_size

            loss = query_loss(lp, adapter, sem, batch, config.loss, generator)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    "Adapter loss is not finite",
                    {"step": step, "recent_losses": monitor.recent()},
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            monitor.record_step(step, loss.item())

            if validate_fn is not None and config.eval_every and step % config.eval_every == 0:
                monitor.record_validation(step, validate_fn(adapter))
    finally:
        lp.requires_grad_(True)

    if not all(torch.isfinite(p).all() for p in adapter.parameters()):
        raise TrainingDivergedError("Adapter weights are not finite", {"steps": config.steps})
    logger.info(f"✅ Adapter trained: final loss {monitor.get_training_report()['final_loss']}")
    return adapter
