#!/usr/bin/env python3
"""
Exception hierarchy for kgcal
Library modules raise these; only the CLI translates them into exit codes
"""

from typing import Any, Dict, List, Optional


class KGCalError(Exception):
    """Base class for every error raised by kgcal"""


class ConfigError(KGCalError, ValueError):
    """Invalid or inconsistent configuration"""


class TripleParseError(KGCalError, ValueError):
    """Malformed line in a triple file"""

    def __init__(self, path: str, line_number: int, message: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {message}")


class QueryParseError(KGCalError, ValueError):
    """Query text outside the DSL grammar, or naming unknown symbols"""

    def __init__(self, message: str, position: Optional[int] = None):
        self.position = position
        if position is not None:
            message = f"{message} (at offset {position})"
        super().__init__(message)


class QueryValidationError(KGCalError, ValueError):
    """Query graph violating structural rules"""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("Query validation failed: " + "; ".join(self.violations))


class IdempotencyError(KGCalError):
    """Operation applied twice to the same artifact"""


class SamplingBudgetError(KGCalError):
    """Query sampler could not satisfy the constraints within its attempt cap"""


class TrainingDivergedError(KGCalError):
    """Loss became non-finite during training"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(f"{message}: {self.diagnostics}" if self.diagnostics else message)


class FormatError(KGCalError):
    """Artifact file with an unexpected header or manifest"""


class ShapeMismatchError(KGCalError):
    """Manifest shapes disagree with the stored blob or the loaded model"""


class VersionError(KGCalError):
    """Artifact written by an unsupported format version"""


class DimensionMismatchError(KGCalError, ValueError):
    """Embedding vectors of incompatible sizes"""


class BudgetExceededError(KGCalError):
    """Exhaustive enumeration larger than the configured budget"""


class UnboundVariableError(KGCalError, KeyError):
    """Substitution missing a variable required for scoring"""


class ContractViolationError(KGCalError, ValueError):
    """Caller broke a documented precondition"""
