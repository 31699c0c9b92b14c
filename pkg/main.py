# main.py
# Command-line front end: ingest -> train-lp -> sample-queries -> train-adapter -> answer / eval / report

import argparse
import json
import logging
import os
import platform
import sys
import time
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence

import networkx
import numpy as np
import pandas as pd
import torch

from beam_search import QueryEngine
from config import (
    CONFIG_KEYS,
    KGCAL_VERSION,
    LOG_FORMAT,
    LOG_LEVEL,
    RunConfig,
    build_run_config,
    get_section_config,
    seed_everything,
)
from errors import ConfigError, KGCalError
from evaluation import evaluate, format_table, read_report, report_to_dict, write_report
from fuzzy_logic import FuzzySemantics
from knowledge_graph import Split, add_reciprocals, export_triples, ingest_triples, load_snapshot, save_snapshot
from link_predictor import LpTrainConfig, hits_at, load_checkpoint, save_checkpoint, train_lp
from query_language import parse_query, serialize_query
from query_sampler import read_query_file, sample_queries, write_query_file
from score_adapter import AdapterTrainConfig, load_adapter, train_adapter
from training_monitor import TrainingMonitor

logger = logging.getLogger("kgcal")


# --- Logging ---

class JsonFormatter(logging.Formatter):
    """One JSON object per record"""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "time": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False)


def setup_logging(level: str = LOG_LEVEL, fmt: str = LOG_FORMAT) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if fmt == "json":
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.basicConfig(level=level, handlers=[handler], force=True)


# --- Manifests ---

def library_versions() -> Dict[str, str]:
    return {
        "kgcal": KGCAL_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "torch": torch.__version__,
        "networkx": networkx.__version__,
    }


def write_manifest(output: str, command: str, argv: Sequence[str], config: RunConfig, started: float,
                   inputs: Dict[str, str], extra: Optional[Dict[str, Any]] = None) -> str:
    """Write <output>.manifest.json next to an artifact"""
    path = f"{output}.manifest.json"
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config.echo(),
        "seed": config.seed,
        "versions": library_versions(),
        "wall_seconds": round(time.perf_counter() - started, 3),
        "inputs": inputs,
        "outputs": [output],
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True, default=str)
        handle.write("\n")
    return path


# --- Subcommands ---

def cmd_ingest(args, config: RunConfig) -> Dict[str, Any]:
    pairs = []
    for entry in args.triples:
        path, _, role = entry.rpartition(":")
        if not path:
            raise ConfigError(f"Expected PATH:ROLE, got '{entry}'")
        pairs.append((path, role))
    kg = ingest_triples(pairs)
    if not args.no_reciprocals:
        kg = add_reciprocals(kg)
    save_snapshot(kg, args.out)
    if args.export_dir:
        export_triples(kg, args.export_dir)
    return {"inputs": {role: path for path, role in pairs}, "extra": {"summary": kg.summary(), "stats": kg.stats}}


def cmd_train_lp(args, config: RunConfig) -> Dict[str, Any]:
    kg = load_snapshot(args.kg)
    monitor = TrainingMonitor("link-predictor", log_every=config.log_every)
    table = train_lp(kg, LpTrainConfig(**get_section_config(config, "lp")), monitor)
    save_checkpoint(table, args.out)
    extra = {"training": monitor.get_training_report()}
    if len(kg.triples[Split.VALID]):
        extra["valid_hits@1"] = hits_at(table, kg.triples[Split.VALID], k=1, kg=kg)
        logger.info(f"📊 Filtered hits@1 on valid: {extra['valid_hits@1']:.4f}")
    return {"inputs": {"kg": args.kg}, "extra": extra}


def cmd_sample_queries(args, config: RunConfig) -> Dict[str, Any]:
    kg = load_snapshot(args.kg)
    section = get_section_config(config, "sampler")
    queries = []
    for query_type in config.query_types:
        queries.extend(sample_queries(
            kg, query_type, config.per_type,
            max_answers=section["max_answers"], seed=section["seed"], split=section["split"],
            attempt_cap=section["attempt_cap"], threads=config.threads,
        ))
    write_query_file(args.out, queries, kg)
    counts = {t: sum(1 for q in queries if q.query_type == t) for t in config.query_types}
    return {"inputs": {"kg": args.kg}, "extra": {"counts": counts}}


def _semantics(config: RunConfig) -> FuzzySemantics:
    return FuzzySemantics.from_names(**get_section_config(config, "fuzzy"))


def _engine(args, config: RunConfig, kg):
    lp = load_checkpoint(args.lp)
    adapter = None if args.no_adapter else load_adapter(args.lp)
    if adapter is not None:
        logger.info(f"📊 Using adapter {adapter.describe()}")
    return QueryEngine(lp, adapter, _semantics(config), k=config.beam_k, kg=kg, budget=config.enum_budget)


def cmd_train_adapter(args, config: RunConfig) -> Dict[str, Any]:
    kg = load_snapshot(args.kg)
    lp = load_checkpoint(args.lp)
    sem = _semantics(config)
    train_config = AdapterTrainConfig(**get_section_config(config, "adapter"))
    queries = read_query_file(args.queries, kg, types=train_config.training_types)

    validate_fn = None
    if args.valid_queries and config.eval_every:
        valid = [q for q in read_query_file(args.valid_queries, kg) if q.hard]

        def validate_fn(adapter):
            engine = QueryEngine(lp, adapter, sem, k=config.beam_k, kg=kg)
            return evaluate(engine, valid, threads=config.threads).mean_mrr

    monitor = TrainingMonitor("adapter", log_every=config.log_every)
    adapter = train_adapter(lp, queries, train_config, sem, monitor=monitor, validate_fn=validate_fn)
    logger.info(f"📊 adapter parameters: {adapter.num_parameters()}")
    save_checkpoint(lp, args.out, adapter=adapter)
    inputs = {"kg": args.kg, "lp": args.lp, "queries": args.queries}
    if args.valid_queries:
        inputs["valid_queries"] = args.valid_queries
    return {
        "inputs": inputs,
        "extra": {"training": monitor.get_training_report(), "adapter": adapter.describe()},
    }


def _read_queries(text_or_path: str) -> List[str]:
    if os.path.exists(text_or_path):
        with open(text_or_path, "r", encoding="utf-8") as handle:
            return [line.strip() for line in handle if line.strip() and not line.lstrip().startswith("#")]
    return [text_or_path]


def cmd_answer(args, config: RunConfig) -> Dict[str, Any]:
    kg = load_snapshot(args.kg)
    engine = _engine(args, config, kg)
    lines = []
    for text in _read_queries(args.query):
        graph = parse_query(text, kg)
        result = engine.answer(graph)
        lines.append(f"# {serialize_query(graph, kg)}")
        for rank, (entity, score) in enumerate(result.top(config.topn), start=1):
            lines.append(f"{rank}\t{kg.entities.name_of(entity)}\t{score:.6f}")
        if args.explain:
            lines.append(result.trace.explain(graph, kg))
    output = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            handle.write(output)
    else:
        sys.stdout.write(output)
    return {"inputs": {"kg": args.kg, "lp": args.lp, "query": args.query}}


def cmd_eval(args, config: RunConfig) -> Dict[str, Any]:
    kg = load_snapshot(args.kg)
    engine = _engine(args, config, kg)
    queries = read_query_file(args.queries, kg)
    report = evaluate(engine, queries, threads=config.threads, diagnostics=args.diagnostics)
    report.config.update({"queries": os.path.basename(args.queries)})
    write_report(report, args.out)
    sys.stdout.write(format_table(report) + "\n")
    return {"inputs": {"kg": args.kg, "lp": args.lp, "queries": args.queries},
            "extra": {"report": report_to_dict(report)}}


def cmd_report(args, config: RunConfig) -> Dict[str, Any]:
    sys.stdout.write(format_table(read_report(args.report)) + "\n")
    return {}


COMMANDS = {
    "ingest": cmd_ingest,
    "train-lp": cmd_train_lp,
    "sample-queries": cmd_sample_queries,
    "train-adapter": cmd_train_adapter,
    "answer": cmd_answer,
    "eval": cmd_eval,
    "report": cmd_report,
}


# --- Argument parsing ---

def _const(value):
    # flags that only override config when given
    return {"action": "store_const", "const": value, "default": None}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", **_const(True))
    common.add_argument("--threads", type=int)
    common.add_argument("--log-level", dest="log_level", choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
    common.add_argument("--log-format", dest="log_format", choices=["text", "json"])
    common.add_argument("--log-every", dest="log_every", type=int)

    fuzzy = argparse.ArgumentParser(add_help=False)
    fuzzy.add_argument("--tnorm", choices=["min", "godel", "prod", "product", "luk", "lukasiewicz"])
    fuzzy.add_argument("--negation", choices=["std", "standard", "cos", "strict-cosine"])
    fuzzy.add_argument("--beam-k", dest="beam_k", type=int)

    engine = argparse.ArgumentParser(add_help=False)
    engine.add_argument("--kg", required=True)
    engine.add_argument("--lp", required=True, help="checkpoint, with or without an adapter")
    engine.add_argument("--no-adapter", action="store_true", help="ignore an adapter stored in the checkpoint")
    engine.add_argument("--enum-budget", dest="enum_budget", type=int)

    parser = argparse.ArgumentParser(prog="kgcal", description="Calibrated complex query answering over knowledge graphs")
    parser.add_argument("--replay", metavar="MANIFEST", help="re-run the command recorded in a manifest")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("ingest", parents=[common], help="read TSV triples into a snapshot")
    p.add_argument("--triples", nargs="+", required=True, metavar="PATH:ROLE")
    p.add_argument("--out", required=True)
    p.add_argument("--no-reciprocals", action="store_true")
    p.add_argument("--export-dir")

    p = sub.add_parser("train-lp", parents=[common], help="train the ComplEx link predictor")
    p.add_argument("--kg", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int)
    p.add_argument("--steps", dest="lp_steps", type=int)
    p.add_argument("--lr", dest="lp_lr", type=float)
    p.add_argument("--batch-size", dest="lp_batch_size", type=int)
    p.add_argument("--n3-weight", dest="n3_weight", type=float)
    p.add_argument("--loss", dest="lp_loss", choices=["1vsall", "bce"])
    p.add_argument("--init-scale", dest="init_scale", type=float)
    p.add_argument("--normalization", choices=["sigmoid", "minmax"])

    p = sub.add_parser("sample-queries", parents=[common], help="sample labelled queries")
    p.add_argument("--kg", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", dest="sample_split", choices=["train", "valid", "test"])
    p.add_argument("--types", dest="query_types")
    p.add_argument("--per-type", dest="per_type", type=int)
    p.add_argument("--max-answers", dest="max_answers", type=int)
    p.add_argument("--attempt-cap", dest="attempt_cap", type=int)

    p = sub.add_parser("train-adapter", parents=[common, fuzzy], help="train the score adapter")
    p.add_argument("--kg", required=True)
    p.add_argument("--lp", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--valid-queries")
    p.add_argument("--out", required=True)
    p.add_argument("--types", dest="train_types")
    p.add_argument("--condition", choices=["global", "pred", "predicate", "subjpred", "subject-predicate", "full"])
    p.add_argument("--psi-layers", dest="psi_layers", type=int, choices=[1, 2])
    p.add_argument("--psi-hidden", dest="psi_hidden", type=int)
    p.add_argument("--loss", dest="adapter_loss", choices=["1vsall", "bce"])
    p.add_argument("--unfreeze-lp", dest="unfreeze_lp", **_const(True))
    p.add_argument("--monotone", **_const(True))
    p.add_argument("--steps", dest="adapter_steps", type=int)
    p.add_argument("--lr", dest="adapter_lr", type=float)
    p.add_argument("--batch-size", dest="adapter_batch_size", type=int)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)

    p = sub.add_parser("answer", parents=[common, fuzzy, engine], help="answer queries with beam search")
    p.add_argument("--query", required=True, help="query file or inline query text")
    p.add_argument("--topn", type=int)
    p.add_argument("--explain", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("eval", parents=[common, fuzzy, engine], help="filtered MRR over labelled queries")
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", action="store_true", help="add the score distribution diagnostic")

    p = sub.add_parser("report", parents=[common], help="render a saved evaluation report")
    p.add_argument("--report", required=True)
    return parser


def _replay(path: str) -> int:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            argv = json.load(handle)["argv"]
    except (OSError, ValueError, KeyError) as exc:
        logger.error(f"❌ Cannot replay {path}: {exc}")
        return 1
    logger.info(f"🚀 Replaying {' '.join(argv)}")
    return main(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2

    if args.replay:
        if args.command:
            parser.print_usage(sys.stderr)
            return 2
        return _replay(args.replay)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2

    started = time.perf_counter()
    try:
        cli_values = {key: value for key, value in vars(args).items() if key in CONFIG_KEYS}
        config = build_run_config(args.config, cli_values)
        setup_logging(config.log_level, config.log_format)
        seed_everything(config.seed, config.deterministic, config.threads)

        outcome = COMMANDS[args.command](args, config)
        output = getattr(args, "out", None)
        if output:
            path = write_manifest(output, args.command, argv, config, started,
                                  outcome.get("inputs", {}), outcome.get("extra"))
            logger.info(f"✅ {args.command} finished; manifest at {path}")
        return 0
    except KGCalError as exc:
        logger.error(f"❌ {args.command} failed: {exc}")
        return 1
    except Exception as exc:
        logger.exception(f"❌ {args.command} failed unexpectedly: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
