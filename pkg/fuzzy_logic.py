#!/usr/bin/env python3
"""
Fuzzy logic operators for aggregating atom scores
t-norms, their dual t-conorms and fuzzy negations over scores in [0, 1]
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import reduce
from typing import Iterable, Union

import torch

from errors import ConfigError

logger = logging.getLogger(__name__)

Score = Union[float, torch.Tensor]


class TNorm(str, Enum):
    """Supported t-norms; the t-conorm is always the dual"""
    GODEL = "godel"
    PRODUCT = "product"
    LUKASIEWICZ = "lukasiewicz"


class Negation(str, Enum):
    """Supported fuzzy negations"""
    STANDARD = "standard"
    STRICT_COSINE = "strict-cosine"


TNORM_ALIASES = {
    "min": TNorm.GODEL,
    "godel": TNorm.GODEL,
    "prod": TNorm.PRODUCT,
    "product": TNorm.PRODUCT,
    "luk": TNorm.LUKASIEWICZ,
    "lukasiewicz": TNorm.LUKASIEWICZ,
}

NEGATION_ALIASES = {
    "std": Negation.STANDARD,
    "standard": Negation.STANDARD,
    "cos": Negation.STRICT_COSINE,
    "strict-cosine": Negation.STRICT_COSINE,
}


@dataclass(frozen=True)
class FuzzySemantics:
    """Choice of t-norm and negation used to score a query"""
    tnorm: TNorm = TNorm.PRODUCT
    negation: Negation = Negation.STANDARD

    @classmethod
    def from_names(cls, tnorm: str, negation: str) -> "FuzzySemantics":
        try:
            kind = TNORM_ALIASES[tnorm.lower()]
        except KeyError:
            raise ConfigError(f"Unknown t-norm '{tnorm}' (expected one of {sorted(TNORM_ALIASES)})")
        try:
            neg = NEGATION_ALIASES[negation.lower()]
        except KeyError:
            raise ConfigError(f"Unknown negation '{negation}' (expected one of {sorted(NEGATION_ALIASES)})")
        return cls(tnorm=kind, negation=neg)

    def describe(self) -> dict:
        return {"tnorm": self.tnorm.value, "negation": self.negation.value}


def clamp_unit(x: Score) -> Score:
    """Clamp a score into [0, 1]; scalars out of range are reported"""
    if isinstance(x, torch.Tensor):
        return x.clamp(0.0, 1.0)
    if x < 0.0 or x > 1.0:
        logger.warning(f"⚠️ Fuzzy input {x!r} outside [0, 1], clamping")
        return min(1.0, max(0.0, float(x)))
    return x


def tnorm(sem: FuzzySemantics, x: Score, y: Score) -> Score:
    """Fuzzy conjunction"""
    x, y = clamp_unit(x), clamp_unit(y)
    if sem.tnorm is TNorm.GODEL:
        if isinstance(x, torch.Tensor) or isinstance(y, torch.Tensor):
            x, y = torch.as_tensor(x), torch.as_tensor(y)
            # ties route the subgradient to the first argument
            return torch.where(x <= y, x, y)
        return x if x <= y else y
    if sem.tnorm is TNorm.PRODUCT:
        return x * y
    if isinstance(x, torch.Tensor) or isinstance(y, torch.Tensor):
        return (x + y - 1.0).clamp(min=0.0)
    return max(0.0, x + y - 1.0)


def tconorm(sem: FuzzySemantics, x: Score, y: Score) -> Score:
    """Fuzzy disjunction, computed literally as 1 - T(1 - x, 1 - y)"""
    x, y = clamp_unit(x), clamp_unit(y)
    return 1.0 - tnorm(sem, 1.0 - x, 1.0 - y)


def negation(sem: FuzzySemantics, x: Score) -> Score:
    """Fuzzy negation"""
    x = clamp_unit(x)
    if sem.negation is Negation.STANDARD:
        return 1.0 - x
    if isinstance(x, torch.Tensor):
        return 0.5 * (1.0 + torch.cos(math.pi * x))
    return 0.5 * (1.0 + math.cos(math.pi * x))


def tnorm_fold(sem: FuzzySemantics, values: Iterable[Score]) -> Score:
    """Left fold of the t-norm over a non-empty sequence"""
    return reduce(lambda acc, value: tnorm(sem, acc, value), values)


def tconorm_fold(sem: FuzzySemantics, values: Iterable[Score]) -> Score:
    """Left fold of the t-conorm over a non-empty sequence"""
    return reduce(lambda acc, value: tconorm(sem, acc, value), values)
