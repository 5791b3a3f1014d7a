"""Command-line interface. Every subcommand takes one TOML config file plus
optional ``--set section.key=value`` overrides; file locations live under the
config's [paths] table."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import chunking as chunking_mod
from . import refgraph as refgraph_mod
from .config import RunConfig, load_config
from .corpus import Corpus, parse_corpus
from .errors import LexragError
from .evaluation import JudgeVerdict, judge_agreement, metric_correlation
from .harness import (
    RETRIEVAL_FILE, REPORT_FILE, Retriever, build_chunks, load_dataset,
    run_benchmark, score, stratified_sample,
)
from .metrics import evaluate_runs
from .retrieval import build_index, dump_runs_jsonl, load_runs_jsonl, TOKENIZERS

logger = logging.getLogger(__name__)


def _load_corpus(config: RunConfig) -> Corpus:
    return Corpus.open(config.path("corpus"))


def _write_json(path: Path | None, obj) -> None:
    text = json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        print(f"wrote {path}")


def cmd_parse_corpus(config: RunConfig, args) -> int:
    src = config.path("corpus_text")
    with open(src, "r", encoding="utf-8") as fp:
        corpus = parse_corpus(fp)
    out = config.path("corpus")
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.save(out)
    unresolved = corpus.unresolved_references()
    print(
        f"parsed {len(corpus.codes)} codes, {len(corpus.sections)} sections, "
        f"{sum(len(r.references) for r in corpus.sections.values())} references "
        f"({len(unresolved)} unresolved) -> {out}"
    )
    return 0


def cmd_chunk(config: RunConfig, args) -> int:
    corpus = _load_corpus(config)
    chunks = chunking_mod.chunk_corpus(corpus, config.chunking)
    out = config.path("chunks")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fp:
        chunking_mod.dump_chunks_jsonl(chunks, fp)
    print(f"{config.chunking.strategy}: {len(chunks)} chunks -> {out}")
    return 0


def cmd_audit_chunks(config: RunConfig, args) -> int:
    corpus = _load_corpus(config)
    with open(config.path("chunks"), "r", encoding="utf-8") as fp:
        chunks = chunking_mod.load_chunks_jsonl(fp)
    audit = chunking_mod.audit_chunks(chunks, corpus)
    _write_json(config.path("audit", required=False), audit.as_dict())
    return 0


def cmd_build_graph(config: RunConfig, args) -> int:
    corpus = _load_corpus(config)
    graph = refgraph_mod.build_graph(corpus)
    out = config.path("graph")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fp:
        graph.dump_edges_jsonl(fp)
    edges = sum(len(v) for v in graph.adjacency.values())
    print(f"{edges} edges over {len(graph.adjacency)} sections -> {out}")
    return 0


def cmd_index(config: RunConfig, args) -> int:
    with open(config.path("chunks"), "r", encoding="utf-8") as fp:
        chunks = chunking_mod.load_chunks_jsonl(fp)
    index = build_index(chunks, TOKENIZERS[config.retriever.tokenizer])
    out = config.path("index")
    obj = {
        "n_docs": index.n_docs,
        "avgdl": index.avgdl,
        "vocabulary": len(index.df),
        "empty_docs": list(index.empty_docs),
    }
    _write_json(out, obj)
    return 0


def cmd_retrieve(config: RunConfig, args) -> int:
    corpus = _load_corpus(config)
    dataset = load_dataset(config.path("dataset"), corpus)
    if config.sample is not None:
        dataset = stratified_sample(
            dataset, config.sample.fraction, config.seed, config.sample.stratify
        )
    chunks = build_chunks(config, corpus)
    retriever = Retriever(config, corpus, chunks)
    runs = [retriever.rank_sections(e, config.top_k) for e in dataset]
    out = config.path("run_dir") / RETRIEVAL_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fp:
        dump_runs_jsonl(sorted(runs, key=lambda r: r.query_id), fp)
    print(f"{len(runs)} queries -> {out}")
    return 0


def cmd_eval_retrieval(config: RunConfig, args) -> int:
    corpus = _load_corpus(config)
    dataset = load_dataset(config.path("dataset"), corpus)
    if config.sample is not None:
        dataset = stratified_sample(
            dataset, config.sample.fraction, config.seed, config.sample.stratify
        )
    with open(config.path("run_dir") / RETRIEVAL_FILE, "r", encoding="utf-8") as fp:
        runs = {r.query_id: r for r in load_runs_jsonl(fp)}
    report = evaluate_runs(dataset, runs, config.ks)
    _write_json(
        config.path("run_dir") / "retrieval_report.json",
        report.to_obj(config.per_sample_reports),
    )
    return 0


def cmd_run_e2e(config: RunConfig, args) -> int:
    corpus = _load_corpus(config)
    dataset = load_dataset(config.path("dataset"), corpus)
    pool_path = config.path("fewshot", required=config.few_shot > 0)
    pool = load_dataset(pool_path, corpus) if pool_path else []
    result = run_benchmark(config, corpus, dataset, pool)
    print(f"run {result.status}: report -> {result.run_dir / REPORT_FILE}")
    return 0 if result.status == "ok" else 2


def cmd_score(config: RunConfig, args) -> int:
    corpus = _load_corpus(config)
    dataset = load_dataset(config.path("dataset"), corpus)
    result = score(config, corpus, dataset)
    print(f"score {result.status}: report -> {result.run_dir / REPORT_FILE}")
    return 0 if result.status == "ok" else 2


def cmd_agreement(config: RunConfig, args) -> int:
    """Compare human and model verdicts from a JSONL of
    {human: {coverage, contradiction}, model: {...}} pairs."""
    pairs_path = Path(args.pairs) if args.pairs else config.path("agreement_pairs")
    human, model = [], []
    with open(pairs_path, "r", encoding="utf-8") as fp:
        for line in fp:
            if not line.strip():
                continue
            obj = json.loads(line)
            human.append(JudgeVerdict(**obj["human"]))
            model.append(JudgeVerdict(**obj["model"]))
    _write_json(config.path("agreement_out", required=False), judge_agreement(human, model))
    return 0


def cmd_sweep_depth(config: RunConfig, args) -> int:
    corpus = _load_corpus(config)
    dataset = load_dataset(config.path("dataset"), corpus)
    with open(config.path("run_dir") / RETRIEVAL_FILE, "r", encoding="utf-8") as fp:
        runs = {r.query_id: r for r in load_runs_jsonl(fp)}
    aligned = [e for e in dataset if e.query_id in runs]
    graph = refgraph_mod.build_graph(corpus)
    depths = [int(d) for d in args.depths.split(",")] if args.depths else list(range(0, 4))
    results = refgraph_mod.depth_sweep(
        [runs[e.query_id] for e in aligned],
        graph,
        depths,
        [set(e.positives) for e in aligned],
    )
    _write_json(
        config.path("sweep_out", required=False),
        {str(d): v for d, v in results.items()},
    )
    return 0


def cmd_report(config: RunConfig, args) -> int:
    """Combine one or more run reports into JSON tables and a plot-ready CSV
    of (run, k, metric, value) series; adds retrieval↔E2E correlations when
    three or more runs are given."""
    run_dirs = [Path(p) for p in args.runs] if args.runs else [config.path("run_dir")]
    tables: dict[str, dict] = {}
    retrieval_series: dict[str, dict[str, float]] = {}
    e2e_series: dict[str, dict[str, float]] = {}
    rows: list[tuple[str, str, str, float]] = []
    for run_dir in run_dirs:
        report = json.loads((run_dir / REPORT_FILE).read_text(encoding="utf-8"))
        name = run_dir.name
        tables[name] = report
        e2e = report.get("e2e", {})
        for metric in ("coverage", "contradiction"):
            if e2e.get(metric) is not None:
                rows.append((name, "-", metric, e2e[metric]))
        for metric in ("e2e_precision", "e2e_recall", "e2e_f1"):
            if metric in e2e:
                rows.append((name, "-", metric, e2e[metric]["macro"]))
        if e2e:
            e2e_series[name] = {
                "coverage": e2e.get("coverage") or 0.0,
                "contradiction": e2e.get("contradiction") or 0.0,
                "e2e_f1": e2e["e2e_f1"]["macro"],
            }
        retrieval = report.get("retrieval")
        if retrieval:
            for k, metrics_at_k in retrieval["metrics"].items():
                for metric, cell in metrics_at_k.items():
                    rows.append((name, k, metric, cell["aggregate"]))
            top_k = max(retrieval["metrics"], key=int)
            retrieval_series[name] = {
                m: cell["aggregate"]
                for m, cell in retrieval["metrics"][top_k].items()
            }
    out: dict = {"runs": tables}
    if len(run_dirs) >= 3 and len(retrieval_series) >= 3:
        out["correlation"] = metric_correlation(retrieval_series, e2e_series)
    out_dir = config.path("report_out", required=False)
    _write_json(out_dir / "tables.json" if out_dir else None, out)
    csv_lines = ["run,k,metric,value"]
    for run, k, metric, value in sorted(rows):
        csv_lines.append(f"{run},{k},{metric},{value}")
    csv_text = "\n".join(csv_lines) + "\n"
    if out_dir:
        (out_dir / "series.csv").write_text(csv_text, encoding="utf-8")
        print(f"wrote {out_dir / 'series.csv'}")
    else:
        sys.stdout.write(csv_text)
    return 0


COMMANDS = {
    "parse-corpus": cmd_parse_corpus,
    "chunk": cmd_chunk,
    "audit-chunks": cmd_audit_chunks,
    "build-graph": cmd_build_graph,
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "eval-retrieval": cmd_eval_retrieval,
    "run-e2e": cmd_run_e2e,
    "score": cmd_score,
    "agreement": cmd_agreement,
    "sweep-depth": cmd_sweep_depth,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lexrag",
        description="Evaluation toolkit for legal QA RAG systems",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="TOML config file")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[],
            metavar="KEY=VALUE", help="override a config value (dotted key)",
        )
        if name == "agreement":
            p.add_argument("--pairs", help="JSONL of {human, model} verdict pairs")
        if name == "sweep-depth":
            p.add_argument("--depths", help="comma-separated depths (default 0-3)")
        if name == "report":
            p.add_argument("--runs", nargs="*", help="run directories to combine")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config, args.overrides)
        return COMMANDS[args.command](config, args)
    except (LexragError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
