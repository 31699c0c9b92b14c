# config.py
# Configuration settings for kgcal

import hashlib
import logging
import os
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

from dotenv import load_dotenv, find_dotenv

from errors import ConfigError

# Load environment variables (handle potential Windows BOM/UTF-16 encodings)
try:
    dotenv_path = find_dotenv(usecwd=True)
    if dotenv_path:
        try:
            # utf-8-sig gracefully handles UTF-8 with BOM on Windows
            load_dotenv(dotenv_path=dotenv_path, encoding="utf-8-sig")
        except UnicodeDecodeError:
            load_dotenv(dotenv_path=dotenv_path, encoding="utf-16")
except Exception as env_exc:
    print(f"WARNING: Failed to load .env file: {env_exc}")

KGCAL_VERSION = "1.0.0"
ENV_PREFIX = "KGCAL_"

# Logging is configured before any RunConfig exists
LOG_LEVEL = os.getenv("KGCAL_LOG_LEVEL", "INFO").upper()
LOG_FORMAT = os.getenv("KGCAL_LOG_FORMAT", "text")


def _as_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _as_list(value: Any) -> List[str]:
    if isinstance(value, (list, tuple)):
        return [str(v).strip() for v in value if str(v).strip()]
    return [part.strip() for part in str(value).split(",") if part.strip()]


ALL_QUERY_TYPES = "1p,2p,3p,2i,3i,pi,ip,2u,up,2in,3in,inp,pin,pni"

# key -> (coercion, default)
CONFIG_KEYS: Dict[str, Tuple[Callable[[Any], Any], Any]] = {
    # ========================================================================
    # GENERAL
    # ========================================================================
    "seed": (int, 0),
    "deterministic": (_as_bool, False),
    "threads": (int, 1),
    "log_level": (str, "INFO"),
    "log_format": (str, "text"),
    "log_every": (int, 100),
    # ========================================================================
    # LINK PREDICTOR
    # ========================================================================
    "dim": (int, 1000),
    "lp_lr": (float, 0.1),
    "lp_steps": (int, 50000),
    "lp_batch_size": (int, 1000),
    "n3_weight": (float, 0.05),
    "lp_loss": (str, "1vsall"),
    "init_scale": (float, 1e-3),
    "normalization": (str, "sigmoid"),
    # ========================================================================
    # FUZZY LOGIC
    # ========================================================================
    "tnorm": (str, "prod"),
    "negation": (str, "std"),
    # ========================================================================
    # ADAPTER
    # ========================================================================
    "condition": (str, "pred"),
    "psi_layers": (int, 1),
    "psi_hidden": (int, 0),
    "adapter_lr": (float, 0.1),
    "adapter_steps": (int, 1000),
    "adapter_batch_size": (int, 256),
    "adapter_loss": (str, "1vsall"),
    "train_types": (_as_list, "2i,3i,2in,3in"),
    "train_fraction": (float, 1.0),
    "unfreeze_lp": (_as_bool, False),
    "monotone": (_as_bool, False),
    "eval_every": (int, 0),
    # ========================================================================
    # INFERENCE AND EVALUATION
    # ========================================================================
    "beam_k": (int, 1024),
    "topn": (int, 10),
    "enum_budget": (int, 1_000_000),
    # ========================================================================
    # QUERY SAMPLER
    # ========================================================================
    "query_types": (_as_list, ALL_QUERY_TYPES),
    "per_type": (int, 100),
    "max_answers": (int, 100),
    "attempt_cap": (int, 1000),
    "sample_split": (str, "test"),
}

NORMALIZATIONS = ("sigmoid", "minmax")
LOSSES = ("1vsall", "bce")
TNORM_NAMES = ("min", "godel", "prod", "product", "luk", "lukasiewicz")
NEGATION_NAMES = ("std", "standard", "cos", "strict-cosine")
CONDITION_NAMES = ("global", "pred", "predicate", "subjpred", "subject-predicate", "full")
SPLIT_NAMES = ("train", "valid", "test")


class RunConfig:
    """Merged configuration: defaults < config file < KGCAL_* environment < CLI flags"""

    def __init__(self, values: Dict[str, Any], sources: Dict[str, str]):
        self._values = dict(values)
        self._sources = dict(sources)

    def __getattr__(self, name: str) -> Any:
        try:
            return self._values[name]
        except KeyError:
            raise AttributeError(name)

    def __getitem__(self, name: str) -> Any:
        return self._values[name]

    def source_of(self, name: str) -> str:
        return self._sources.get(name, "default")

    def as_dict(self) -> Dict[str, Any]:
        return dict(self._values)

    def echo(self) -> Dict[str, Any]:
        """Config values with their origin, for run manifests"""
        return {key: {"value": self._values[key], "source": self.source_of(key)} for key in sorted(self._values)}


def read_config_file(path: str) -> Dict[str, str]:
    """Parse a flat `key = value` file; '#' starts a comment"""
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    values = {}
    with open(path, "r", encoding="utf-8-sig") as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_number}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.lower().replace("-", "_")] = value
    return values


def environment_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    return {
        name[len(ENV_PREFIX):].lower(): value
        for name, value in environ.items()
        if name.startswith(ENV_PREFIX)
    }


def validate_config(values: Dict[str, Any]) -> bool:
    """Validate merged configuration values"""
    errors = []

    for key in ("threads", "log_every", "dim", "lp_steps", "lp_batch_size", "adapter_steps",
                "adapter_batch_size", "beam_k", "topn", "enum_budget", "max_answers", "attempt_cap"):
        if values[key] <= 0:
            errors.append(f"{key} must be positive")
    for key in ("per_type", "eval_every", "psi_hidden", "seed"):
        if values[key] < 0:
            errors.append(f"{key} must be non-negative")
    for key in ("lp_lr", "adapter_lr", "init_scale"):
        if not values[key] > 0:
            errors.append(f"{key} must be positive")
    if values["n3_weight"] < 0:
        errors.append("n3_weight must be non-negative")
    if not 0 < values["train_fraction"] <= 1:
        errors.append("train_fraction must be in (0, 1]")

    choices = {
        "normalization": NORMALIZATIONS,
        "lp_loss": LOSSES,
        "adapter_loss": LOSSES,
        "tnorm": TNORM_NAMES,
        "negation": NEGATION_NAMES,
        "condition": CONDITION_NAMES,
        "sample_split": SPLIT_NAMES,
        "log_format": ("text", "json"),
        "log_level": ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"),
    }
    for key, allowed in choices.items():
        if values[key] not in allowed:
            errors.append(f"{key} must be one of {', '.join(allowed)} (got '{values[key]}')")
    if values["psi_layers"] not in (1, 2):
        errors.append("psi_layers must be 1 or 2")

    known_types = ALL_QUERY_TYPES.split(",")
    for key in ("train_types", "query_types"):
        unknown = [t for t in values[key] if t not in known_types]
        if unknown:
            errors.append(f"{key} has unknown query types: {', '.join(unknown)}")
        if not values[key]:
            errors.append(f"{key} must name at least one query type")

    if errors:
        raise ConfigError(f"Configuration validation failed: {'; '.join(errors)}")

    return True


def build_run_config(
    config_path: Optional[str] = None,
    cli_values: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Merge every configuration layer, coerce types and validate"""
    values = {key: default for key, (_, default) in CONFIG_KEYS.items()}
    sources: Dict[str, str] = {}
    errors = []

    layers = []
    if config_path:
        layers.append((f"file:{config_path}", read_config_file(config_path)))
    layers.append(("env", environment_overrides(environ)))
    layers.append(("cli", {k: v for k, v in (cli_values or {}).items() if v is not None}))

    for source, layer in layers:
        for key, value in layer.items():
            if key not in CONFIG_KEYS:
                errors.append(f"unknown key '{key}' ({source})")
                continue
            values[key] = value
            sources[key] = source

    for key, (coerce, _) in CONFIG_KEYS.items():
        try:
            values[key] = coerce(values[key])
        except (TypeError, ValueError) as exc:
            errors.append(f"{key}: {exc}")
    if isinstance(values.get("log_level"), str):
        values["log_level"] = values["log_level"].upper()

    if errors:
        raise ConfigError(f"Configuration validation failed: {'; '.join(errors)}")
    validate_config(values)
    return RunConfig(values, sources)


# ============================================================================
# CONFIGURATION HELPERS
# ============================================================================

def get_section_config(config: RunConfig, section: str) -> Dict[str, Any]:
    """Keyword arguments for one component's typed config"""
    sections = {
        "lp": {
            "dim": config.dim,
            "learning_rate": config.lp_lr,
            "steps": config.lp_steps,
            "batch_size": config.lp_batch_size,
            "n3_weight": config.n3_weight,
            "seed": component_seed(config.seed, "lp"),
            "loss": config.lp_loss,
            "init_scale": config.init_scale,
            "normalization": config.normalization,
            "log_every": config.log_every,
        },
        "adapter": {
            "training_types": tuple(config.train_types),
            "steps": config.adapter_steps,
            "learning_rate": config.adapter_lr,
            "batch_size": config.adapter_batch_size,
            "loss": config.adapter_loss,
            "condition": config.condition,
            "psi_layers": config.psi_layers,
            "psi_hidden": config.psi_hidden or None,
            "unfreeze_lp": config.unfreeze_lp,
            "monotone": config.monotone,
            "train_fraction": config.train_fraction,
            "eval_every": config.eval_every,
            "seed": component_seed(config.seed, "adapter"),
            "log_every": config.log_every,
        },
        "fuzzy": {"tnorm": config.tnorm, "negation": config.negation},
        "sampler": {
            "max_answers": config.max_answers,
            "attempt_cap": config.attempt_cap,
            "seed": component_seed(config.seed, "sampler"),
            "split": config.sample_split,
        },
    }
    if section not in sections:
        raise ConfigError(f"Unknown config section '{section}'")
    return sections[section]


def component_seed(seed: int, label: str) -> int:
    """Stable seed for a labelled random stream forked from the run seed"""
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def seed_everything(seed: int, deterministic: bool = False, threads: int = 1) -> None:
    """Seed global generators and pin torch to reproducible kernels"""
    import numpy as np
    import torch

    np.random.seed(component_seed(seed, "numpy") % (2 ** 32))
    torch.manual_seed(component_seed(seed, "torch"))
    torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(bool(deterministic))
    logging.getLogger(__name__).debug(f"Seeded run with {seed} (deterministic={deterministic}, threads={threads})")
