import json

import numpy as np
import pytest
import torch

from conftest import write_tsv
from knowledge_graph import load_snapshot
from main import main


@pytest.fixture(autouse=True)
def restore_torch_flags():
    yield
    torch.use_deterministic_algorithms(False)


def _write_graph(directory):
    rng = np.random.default_rng(42)
    rows = sorted({(f"n{s}", f"r{p}", f"n{o}") for s, p, o in zip(rng.integers(30, size=240),
                                                                   rng.integers(3, size=240),
                                                                   rng.integers(30, size=240)) if s != o})
    rows = [rows[i] for i in rng.permutation(len(rows))]
    cut_train, cut_valid = int(0.8 * len(rows)), int(0.9 * len(rows))
    splits = {"train": rows[:cut_train], "valid": rows[cut_train:cut_valid], "test": rows[cut_valid:]}
    return [f"{write_tsv(directory / f'{role}.tsv', split)}:{role}" for role, split in splits.items()]


def _run_pipeline(directory):
    paths = {name: str(directory / name) for name in
             ("kg.bin", "lp.ckpt", "train.jsonl", "test.jsonl", "adapted.ckpt", "report.json")}
    common = ["--seed", "1", "--deterministic", "--log-level", "WARNING"]
    steps = [
        ["ingest", "--triples", *_write_graph(directory), "--out", paths["kg.bin"]],
        ["train-lp", "--kg", paths["kg.bin"], "--out", paths["lp.ckpt"], "--dim", "8", "--steps", "500",
         "--batch-size", "64"],
        ["sample-queries", "--kg", paths["kg.bin"], "--out", paths["train.jsonl"], "--split", "train",
         "--types", "2i,2in", "--per-type", "20"],
        ["sample-queries", "--kg", paths["kg.bin"], "--out", paths["test.jsonl"], "--split", "test",
         "--types", "1p,2i,2in", "--per-type", "20"],
        ["train-adapter", "--kg", paths["kg.bin"], "--lp", paths["lp.ckpt"], "--queries", paths["train.jsonl"],
         "--out", paths["adapted.ckpt"], "--steps", "200", "--types", "2i,2in", "--beam-k", "16"],
        ["eval", "--kg", paths["kg.bin"], "--lp", paths["adapted.ckpt"], "--queries", paths["test.jsonl"],
         "--out", paths["report.json"], "--beam-k", "16"],
    ]
    for argv in steps:
        assert main(argv + common) == 0, argv[0]
    return paths


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    try:
        yield _run_pipeline(tmp_path_factory.mktemp("first"))
    finally:
        torch.use_deterministic_algorithms(False)


def _manifest(path: str) -> dict:
    with open(f"{path}.manifest.json", "r", encoding="utf-8") as handle:
        return json.load(handle)


def test_usage_errors_exit_with_two():
    assert main([]) == 2
    assert main(["train-lp"]) == 2
    assert main(["--replay", "run.manifest.json", "report", "--report", "r.json"]) == 2


def test_domain_errors_exit_with_one(tmp_path):
    assert main(["ingest", "--triples", "no-role-given", "--out", str(tmp_path / "kg.bin")]) == 1
    assert main(["report", "--report", str(tmp_path / "missing.json")]) == 1
    assert main(["train-lp", "--kg", str(tmp_path / "kg.bin"), "--out", "x", "--dim", "0"]) == 1


def test_pipeline_writes_manifests(pipeline):
    ingest = _manifest(pipeline["kg.bin"])
    assert ingest["command"] == "ingest"
    assert ingest["summary"]["entities"] == load_snapshot(pipeline["kg.bin"]).num_entities
    assert ingest["config"]["seed"] == {"value": 1, "source": "cli"}
    assert ingest["versions"]["kgcal"]

    training = _manifest(pipeline["lp.ckpt"])
    assert training["training"]["steps"] == 500
    assert 0.0 <= training["valid_hits@1"] <= 1.0

    counts = _manifest(pipeline["test.jsonl"])["counts"]
    assert counts == {"1p": 20, "2i": 20, "2in": 20}


def test_adapter_manifest_reports_parameter_count(pipeline):
    adapter = _manifest(pipeline["adapted.ckpt"])["adapter"]
    assert adapter["condition"] == "predicate"
    assert adapter["parameters"] == 4 * 8 + 2


def test_eval_report_and_rendering(pipeline, capsys):
    with open(pipeline["report.json"], "r", encoding="utf-8") as handle:
        report = json.load(handle)
    assert set(report["per_type"]) == {"1p", "2i", "2in"}
    assert all(0.0 < mrr <= 1.0 for mrr in report["per_type"].values())
    assert report["config"]["k"] == 16 and report["config"]["adapter"]["parameters"] == 34

    assert main(["report", "--report", pipeline["report.json"]]) == 0
    table = capsys.readouterr().out
    assert table.split("\n")[0].split() == ["1p", "2i", "2in", "avg_p", "avg_n"]


def test_answer_writes_top_entities(pipeline, tmp_path):
    kg = load_snapshot(pipeline["kg.bin"])
    anchor = kg.entities.name_of(int(kg.triples["train"][0][0]))
    relation = kg.relations.name_of(int(kg.triples["train"][0][1]))
    out = tmp_path / "answers.txt"
    argv = ["answer", "--kg", pipeline["kg.bin"], "--lp", pipeline["adapted.ckpt"], "--query",
            f"?T : {relation}({anchor}, T)", "--topn", "3", "--explain", "--out", str(out)]
    assert main(argv) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == f"# ?T : {relation}({anchor}, T)"
    assert [line.split("\t")[0] for line in lines[1:4]] == ["1", "2", "3"]
    assert lines[4] == "branch 1/1"


def test_replay_reproduces_the_report(pipeline):
    before = open(pipeline["report.json"], "rb").read()
    assert main(["--replay", f"{pipeline['report.json']}.manifest.json"]) == 0
    assert open(pipeline["report.json"], "rb").read() == before
    assert main(["--replay", "no-such.manifest.json"]) == 1


@pytest.mark.slow
def test_pipeline_is_byte_for_byte_reproducible(pipeline, tmp_path):
    second = _run_pipeline(tmp_path)
    for name in ("kg.bin", "lp.ckpt", "train.jsonl", "test.jsonl", "adapted.ckpt", "report.json"):
        with open(pipeline[name], "rb") as first_file, open(second[name], "rb") as second_file:
            assert first_file.read() == second_file.read(), name
