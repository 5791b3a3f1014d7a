from __future__ import annotations

import json

import pytest

from lexrag.cli import main

from conftest import DATASET_ROWS, FEWSHOT_ROWS, MARKER_TEXT, write_jsonl


@pytest.fixture()
def workspace(tmp_path):
    (tmp_path / "corpus.txt").write_text(MARKER_TEXT, encoding="utf-8")
    write_jsonl(tmp_path / "dataset.jsonl", DATASET_ROWS)
    write_jsonl(tmp_path / "fewshot.jsonl", FEWSHOT_ROWS)
    config = f"""
[run]
mode = "structured_rag"
top_k = 3
few_shot = 2
seed = 7
ks = [1, 3]
analytics_k = 3

[chunking]
strategy = "hierarchy_aware"

[retriever]
kind = "bm25"

[generator]
kind = "echo"

[judge]
kind = "fixed"

[paths]
corpus_text = "{tmp_path}/corpus.txt"
corpus = "{tmp_path}/corpus.jsonl"
chunks = "{tmp_path}/chunks.jsonl"
graph = "{tmp_path}/graph.jsonl"
index = "{tmp_path}/index.json"
audit = "{tmp_path}/audit.json"
dataset = "{tmp_path}/dataset.jsonl"
fewshot = "{tmp_path}/fewshot.jsonl"
run_dir = "{tmp_path}/run"
agreement_pairs = "{tmp_path}/pairs.jsonl"
agreement_out = "{tmp_path}/agreement.json"
sweep_out = "{tmp_path}/sweep.json"
report_out = "{tmp_path}/reports"
"""
    cfg = tmp_path / "config.toml"
    cfg.write_text(config, encoding="utf-8")
    return tmp_path, str(cfg)


def test_full_cli_walkthrough(workspace, capsys):
    tmp_path, cfg = workspace

    assert main(["parse-corpus", cfg]) == 0
    assert (tmp_path / "corpus.jsonl").exists()

    assert main(["chunk", cfg]) == 0
    assert (tmp_path / "chunks.jsonl").exists()

    assert main(["audit-chunks", cfg]) == 0
    audit = json.loads((tmp_path / "audit.json").read_text())
    assert audit == {
        "sections_per_chunk": 1.0,
        "chunks_per_section": 1.0,
        "fail_chunk_ratio": 0.0,
        "fail_section_ratio": 0.0,
        "uncovered_section_ratio": 0.0,
    }

    assert main(["build-graph", cfg]) == 0
    edges = [json.loads(l) for l in (tmp_path / "graph.jsonl").read_text().splitlines()]
    assert {"from": "sea-2535:291", "to": "sea-2535:186"} in edges

    assert main(["index", cfg]) == 0
    index = json.loads((tmp_path / "index.json").read_text())
    assert index["n_docs"] == 15

    assert main(["retrieve", cfg]) == 0
    runs = (tmp_path / "run" / "retrieval.jsonl").read_text().splitlines()
    assert len(runs) == len(DATASET_ROWS)

    assert main(["eval-retrieval", cfg]) == 0
    report = json.loads((tmp_path / "run" / "retrieval_report.json").read_text())
    assert set(report["metrics"]) == {"1", "3"}

    assert main(["run-e2e", cfg]) == 0
    e2e_report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert e2e_report["status"] == "ok"
    assert e2e_report["e2e"]["coverage"] == 100.0

    before = (tmp_path / "run" / "report.json").read_bytes()
    assert main(["score", cfg]) == 0
    assert (tmp_path / "run" / "report.json").read_bytes() == before

    pairs = [
        {"human": {"coverage": 100, "contradiction": 0},
         "model": {"coverage": 100, "contradiction": 0}},
        {"human": {"coverage": 50, "contradiction": 1},
         "model": {"coverage": 50, "contradiction": 1}},
    ]
    write_jsonl(tmp_path / "pairs.jsonl", pairs)
    assert main(["agreement", cfg]) == 0
    agreement = json.loads((tmp_path / "agreement.json").read_text())
    assert agreement["coverage"]["f1"] == 1.0

    assert main(["sweep-depth", cfg, "--depths", "0,1,2"]) == 0
    sweep = json.loads((tmp_path / "sweep.json").read_text())
    assert set(sweep) == {"0", "1", "2"}
    assert all(v == 0.0 for v in sweep["0"]["deltas"].values())

    assert main(["report", cfg, "--runs", str(tmp_path / "run")]) == 0
    tables = json.loads((tmp_path / "reports" / "tables.json").read_text())
    assert "run" in tables["runs"]
    series = (tmp_path / "reports" / "series.csv").read_text().splitlines()
    assert series[0] == "run,k,metric,value"
    assert len(series) > 5


def test_cli_override_changes_behavior(workspace):
    tmp_path, cfg = workspace
    assert main(["parse-corpus", cfg]) == 0
    assert main(["chunk", cfg, "--set", "chunking.strategy=\"line\"",
                 "--set", "chunking.chunk_size=200", "--set", "chunking.chunk_overlap=50"]) == 0
    chunks = [json.loads(l) for l in (tmp_path / "chunks.jsonl").read_text().splitlines()]
    assert any(len(c["covered_full"]) != 1 or c["covered_partial"] for c in chunks)


def test_cli_error_is_reported_not_raised(workspace, capsys):
    tmp_path, cfg = workspace
    code = main(["chunk", cfg, "--set", "paths.corpus=\"/nonexistent/corpus.jsonl\""])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_cli_unknown_config_key_fails(workspace):
    _, cfg = workspace
    assert main(["run-e2e", cfg, "--set", "run.bogus=1"]) == 1


def test_report_correlation_over_three_runs(workspace, tmp_path):
    ws, cfg = workspace
    assert main(["parse-corpus", cfg]) == 0
    variants = {
        "golden": ["--set", "run.mode=\"golden_context\"",
                   "--set", f"paths.run_dir=\"{ws}/runs/golden\""],
        "structured": ["--set", f"paths.run_dir=\"{ws}/runs/structured\""],
        "naive": ["--set", "run.mode=\"naive_rag\"",
                  "--set", "chunking.strategy=\"line\"",
                  "--set", "chunking.chunk_size=120",
                  "--set", "chunking.chunk_overlap=20",
                  "--set", f"paths.run_dir=\"{ws}/runs/naive\""],
    }
    for args in variants.values():
        assert main(["run-e2e", cfg, *args]) == 0
    run_dirs = [str(ws / "runs" / name) for name in variants]
    assert main(["report", cfg, "--runs", *run_dirs]) == 0
    tables = json.loads((ws / "reports" / "tables.json").read_text())
    assert set(tables["runs"]) == set(variants)
    assert "correlation" in tables
    cells = tables["correlation"]["correlations"]
    assert "multi_mrr" in cells
    for value in cells["multi_mrr"].values():
        assert value is None or -1.0 <= value <= 1.0
