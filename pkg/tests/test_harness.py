from __future__ import annotations

import json
import logging

import pytest

from lexrag.clients import CitationFaithfulGenerator, EchoGenerator, UnreachableClient
from lexrag.config import RunConfig, config_from_dict
from lexrag.corpus import SectionId
from lexrag.errors import ConfigError, ParseError, RunError
from lexrag.harness import (
    GENERATIONS_FILE, JUDGMENTS_FILE, RETRIEVAL_FILE, REPORT_FILE,
    PromptBundle, Retriever, assemble_context, build_chunks, build_exemplars,
    check_fewshot_disjoint, generate, load_dataset, parse_generation,
    run_benchmark, score, stratified_sample,
)
from lexrag.refgraph import AugmentSpec, augment, build_graph

from conftest import DATASET_ROWS, write_jsonl


def base_config(tmp_path, corpus_path, dataset_path, fewshot_path, **overrides) -> RunConfig:
    doc = {
        "run": {"mode": "structured_rag", "top_k": 3, "few_shot": 2, "seed": 7,
                "ks": [1, 3, 5], "analytics_k": 3},
        "chunking": {"strategy": "hierarchy_aware"},
        "retriever": {"kind": "bm25"},
        "generator": {"kind": "echo"},
        "judge": {"kind": "fixed"},
        "paths": {
            "corpus": str(corpus_path),
            "dataset": str(dataset_path),
            "fewshot": str(fewshot_path),
            "run_dir": str(tmp_path / "run"),
        },
    }
    for dotted, value in overrides.items():
        node = doc
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return config_from_dict(doc)


class TestLoadDataset:
    def test_loads_fixture(self, dataset_path, corpus):
        entries = load_dataset(dataset_path, corpus)
        assert len(entries) == 5
        q2 = next(e for e in entries if e.query_id == "q2")
        assert q2.positives == (SectionId("sea-2535", "291"), SectionId("sea-2535", "186"))
        assert q2.unresolved == ()

    def test_unresolved_positive_flagged(self, tmp_path, corpus):
        rows = [dict(DATASET_ROWS[0])]
        rows[0] = {**rows[0], "positives": [{"law": "rc", "number": "9999"}]}
        path = write_jsonl(tmp_path / "d.jsonl", rows)
        entries = load_dataset(path, corpus)
        assert entries[0].unresolved == (SectionId("rc", "9999"),)

    def test_duplicate_question_deduplicated_with_warning(self, tmp_path, corpus, caplog):
        rows = [DATASET_ROWS[0], {**DATASET_ROWS[1], "question": DATASET_ROWS[0]["question"]}]
        path = write_jsonl(tmp_path / "d.jsonl", rows)
        with caplog.at_level(logging.WARNING):
            entries = load_dataset(path, corpus)
        assert len(entries) == 1
        assert "duplicate question" in caplog.text

    def test_schema_violation_reports_line(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"query_id": "q", "question": "x"}\n', encoding="utf-8")
        with pytest.raises(ParseError) as err:
            load_dataset(path)
        assert "line 1" in str(err.value)

    def test_duplicate_positive_dropped(self, tmp_path, corpus, caplog):
        rows = [{**DATASET_ROWS[0],
                 "positives": [{"law": "rc", "number": "18", "suffix": "bis"}] * 2}]
        path = write_jsonl(tmp_path / "d.jsonl", rows)
        with caplog.at_level(logging.WARNING):
            entries = load_dataset(path, corpus)
        assert len(entries[0].positives) == 1


class TestSamplingAndFewshot:
    def test_stratified_sample_keeps_every_stratum(self, dataset_path, corpus):
        entries = load_dataset(dataset_path, corpus)
        sampled = stratified_sample(entries, fraction=0.4, seed=1)
        laws = {e.positives[0].law for e in entries}
        assert {e.positives[0].law for e in sampled} == laws
        assert len(sampled) < len(entries)
        assert sampled == stratified_sample(entries, fraction=0.4, seed=1)

    def test_fraction_one_is_identity(self, dataset_path, corpus):
        entries = load_dataset(dataset_path, corpus)
        assert stratified_sample(entries, 1.0, seed=0) == entries

    def test_fewshot_overlap_rejected(self, dataset_path, corpus):
        entries = load_dataset(dataset_path, corpus)
        with pytest.raises(ConfigError):
            check_fewshot_disjoint(entries[:1], entries)

    def test_exemplars_carry_contract_answer_block(self, fewshot_path, corpus):
        pool = load_dataset(fewshot_path, corpus)
        exemplars = build_exemplars(pool, corpus, count=2, seed=3, with_context=True)
        assert len(exemplars) == 2
        for _q, ctx, answer in exemplars:
            assert "ANSWER:" in answer and "CITATIONS:" in answer
            assert "[[" in ctx


class TestAssembleContext:
    def _entries(self, dataset_path, corpus):
        return {e.query_id: e for e in load_dataset(dataset_path, corpus)}

    def test_parametric_empty(self, tmp_path, corpus_path, dataset_path, fewshot_path, corpus):
        config = base_config(tmp_path, corpus_path, dataset_path, fewshot_path,
                             **{"run.mode": "parametric"})
        entry = self._entries(dataset_path, corpus)["q1"]
        records, ranked = assemble_context(entry, config, corpus, None, None)
        assert records == [] and ranked is None

    def test_golden_context_is_positives_verbatim(self, tmp_path, corpus_path, dataset_path,
                                                  fewshot_path, corpus):
        config = base_config(tmp_path, corpus_path, dataset_path, fewshot_path,
                             **{"run.mode": "golden_context"})
        entry = self._entries(dataset_path, corpus)["q2"]
        records, ranked = assemble_context(entry, config, corpus, None, None)
        assert [r.id for r in records] == list(entry.positives)
        assert ranked.ids == [s.key() for s in entry.positives]

    def test_golden_context_unresolved_positive_is_run_error(
            self, tmp_path, corpus_path, dataset_path, fewshot_path, corpus):
        config = base_config(tmp_path, corpus_path, dataset_path, fewshot_path,
                             **{"run.mode": "golden_context"})
        rows = [{**DATASET_ROWS[0], "positives": [{"law": "rc", "number": "9999"}]}]
        path = write_jsonl(tmp_path / "d2.jsonl", rows)
        entry = load_dataset(path, corpus)[0]
        with pytest.raises(RunError):
            assemble_context(entry, config, corpus, None, None)

    def test_long_context_is_whole_corpus(self, tmp_path, corpus_path, dataset_path,
                                          fewshot_path, corpus):
        config = base_config(tmp_path, corpus_path, dataset_path, fewshot_path,
                             **{"run.mode": "long_context"})
        entry = self._entries(dataset_path, corpus)["q1"]
        records, ranked = assemble_context(entry, config, corpus, None, None)
        assert len(records) == len(corpus.sections)
        assert ranked.ids == [r.id.key() for r in corpus.in_order()]

    def test_structured_rag_depth1_matches_retrieve_then_augment(
            self, tmp_path, corpus_path, dataset_path, fewshot_path, corpus):
        config = base_config(tmp_path, corpus_path, dataset_path, fewshot_path,
                             **{"augment.enabled": True, "augment.max_depth": 1})
        entry = self._entries(dataset_path, corpus)["q2"]
        chunks = build_chunks(config, corpus)
        retriever = Retriever(config, corpus, chunks)
        graph = build_graph(corpus)
        records, ranked = assemble_context(entry, config, corpus, retriever, graph)
        expected = augment(retriever.rank_sections(entry, 3), graph, AugmentSpec(max_depth=1))
        assert ranked.ids == expected.ids
        assert [r.id.key() for r in records] == expected.ids

    def test_naive_rag_context_is_mapped_sections(self, tmp_path, corpus_path, dataset_path,
                                                  fewshot_path, corpus):
        config = base_config(
            tmp_path, corpus_path, dataset_path, fewshot_path,
            **{"run.mode": "naive_rag", "chunking.strategy": "line",
               "chunking.chunk_size": 200, "chunking.chunk_overlap": 50})
        entry = self._entries(dataset_path, corpus)["q1"]
        chunks = build_chunks(config, corpus)
        assert all(c.covered_full for c in chunks)  # filtered before retrieval
        retriever = Retriever(config, corpus, chunks)
        records, ranked = assemble_context(entry, config, corpus, retriever, None)
        assert ranked.ids == [r.id.key() for r in records]


class TestRetrieverKinds:
    def test_fused_retriever_over_hierarchy_chunks(self, tmp_path, corpus_path, dataset_path,
                                                   fewshot_path, corpus):
        config = base_config(
            tmp_path, corpus_path, dataset_path, fewshot_path,
            **{"retriever.kind": "fused",
               "retriever.weights": {"dense": 0.8, "sparse": 0.2},
               "paths.embeddings": str(tmp_path / "emb.jsonl"),
               "paths.query_embeddings": str(tmp_path / "qemb.jsonl")})
        chunks = build_chunks(config, corpus)
        # Deterministic synthetic embeddings keyed by chunk id; q1's best
        # match is made to be the rc:18 bis chunk.
        target = next(c for c in chunks if c.covered_full[0].key() == "rc:18 bis")
        rows = []
        for i, chunk in enumerate(chunks):
            base = [1.0, 0.0] if chunk.chunk_id == target.chunk_id else [0.0, 1.0]
            rows.append({"doc_id": chunk.chunk_id, "head": "dense", "vector": base})
            rows.append({"doc_id": chunk.chunk_id, "head": "sparse",
                         "sparse": {"seven": 1.0 if chunk.chunk_id == target.chunk_id else 0.0}})
        write_jsonl(tmp_path / "emb.jsonl", rows)
        write_jsonl(tmp_path / "qemb.jsonl", [
            {"doc_id": "q1", "head": "dense", "vector": [1.0, 0.0]},
            {"doc_id": "q1", "head": "sparse", "sparse": {"seven": 2.0}},
        ])
        retriever = Retriever(config, corpus, chunks)
        entry = {e.query_id: e for e in load_dataset(dataset_path, corpus)}["q1"]
        ranked = retriever.rank_sections(entry, 3)
        assert ranked.ids[0] == "rc:18 bis"

    def test_fused_missing_query_vectors_is_run_error(self, tmp_path, corpus_path,
                                                      dataset_path, fewshot_path, corpus):
        config = base_config(
            tmp_path, corpus_path, dataset_path, fewshot_path,
            **{"retriever.kind": "fused",
               "retriever.weights": {"dense": 1.0},
               "paths.embeddings": str(tmp_path / "emb.jsonl"),
               "paths.query_embeddings": str(tmp_path / "qemb.jsonl")})
        chunks = build_chunks(config, corpus)
        write_jsonl(tmp_path / "emb.jsonl",
                    [{"doc_id": c.chunk_id, "head": "dense", "vector": [1.0]} for c in chunks])
        write_jsonl(tmp_path / "qemb.jsonl", [])
        retriever = Retriever(config, corpus, chunks)
        entry = load_dataset(dataset_path, corpus)[0]
        with pytest.raises(RunError):
            retriever.rank_sections(entry, 3)

    def test_lclm_retriever_requests_lclm_k_but_context_is_top_k(
            self, tmp_path, corpus_path, dataset_path, fewshot_path, corpus):
        config = base_config(
            tmp_path, corpus_path, dataset_path, fewshot_path,
            **{"retriever.kind": "lclm", "retriever.lclm_k": 8, "run.top_k": 2})
        retriever = Retriever(config, corpus, build_chunks(config, corpus))
        entry = load_dataset(dataset_path, corpus)[0]
        records, ranked = assemble_context(entry, config, corpus, retriever, None)
        # The echo stub lists every identifier token it sees, capped at lclm_k.
        assert len(ranked.items) == 8
        assert len(records) == 2
        assert [r.id.key() for r in records] == ranked.ids[:2]


class TestGeneration:
    def test_parse_wellformed_contract(self):
        text = "ANSWER:\nSeven days.\n\nCITATIONS:\n[[rc:18 bis]]\n[[rc:18]]\n"
        answer, citations, flags = parse_generation(text)
        assert answer == "Seven days."
        assert [c.key() for c in citations] == ["rc:18 bis", "rc:18"]
        assert flags == []

    def test_prose_without_citation_block_flagged(self):
        answer, citations, flags = parse_generation("Just prose, no blocks.")
        assert citations == []
        assert "missing_citation_block" in flags

    def test_malformed_token_flagged_not_fatal(self):
        text = "ANSWER:\nx\nCITATIONS:\n[[not a key]]\n[[rc:18]]\n"
        _, citations, flags = parse_generation(text)
        assert [c.key() for c in citations] == ["rc:18"]
        assert "bad_citation_token" in flags

    def test_reformat_retry_then_parse_error_flag(self, corpus):
        class ProseClient:
            def __init__(self):
                self.calls = 0

            def complete(self, prompt):
                self.calls += 1
                return "no structure at all"

        client = ProseClient()
        bundle = PromptBundle("sys", (), "q?", ())
        record = generate(bundle, client, query_id="q", mode="parametric")
        assert client.calls == 2
        assert "parse_error" in record.flags
        assert record.citations == ()

    def test_echo_generator_cites_context(self, corpus):
        records = [corpus.sections[SectionId("rc", "18")]]
        bundle = PromptBundle("sys", (), "when is tax due?", tuple(records))
        record = generate(bundle, EchoGenerator(), query_id="q", mode="structured_rag")
        assert record.answer_text == "when is tax due?"
        assert [c.key() for c in record.citations] == ["rc:18"]
        assert record.flags == ()

    def test_citation_faithful_on_empty_context_cites_nothing(self):
        bundle = PromptBundle("sys", (), "q?", ())
        record = generate(bundle, CitationFaithfulGenerator(), query_id="q", mode="parametric")
        assert record.citations == ()


class TestRunBenchmark:
    def _run(self, tmp_path, corpus_path, dataset_path, fewshot_path, corpus, **overrides):
        config = base_config(tmp_path, corpus_path, dataset_path, fewshot_path, **overrides)
        dataset = load_dataset(config.path("dataset"), corpus)
        pool = load_dataset(config.path("fewshot"), corpus)
        result = run_benchmark(config, corpus, dataset, pool)
        return config, result

    def test_echo_run_is_deterministic(self, tmp_path, corpus_path, dataset_path,
                                       fewshot_path, corpus):
        config1, r1 = self._run(tmp_path / "a", corpus_path, dataset_path, fewshot_path, corpus)
        config2, r2 = self._run(tmp_path / "b", corpus_path, dataset_path, fewshot_path, corpus)
        for name in (RETRIEVAL_FILE, GENERATIONS_FILE, JUDGMENTS_FILE):
            assert (r1.run_dir / name).read_bytes() == (r2.run_dir / name).read_bytes()
        report1 = (r1.run_dir / REPORT_FILE).read_bytes()
        report2 = (r2.run_dir / REPORT_FILE).read_bytes()
        assert report1 == report2
        assert r1.status == "ok"

    def test_workers_do_not_change_artifacts(self, tmp_path, corpus_path, dataset_path,
                                             fewshot_path, corpus):
        _, r1 = self._run(tmp_path / "a", corpus_path, dataset_path, fewshot_path, corpus)
        _, r4 = self._run(tmp_path / "b", corpus_path, dataset_path, fewshot_path, corpus,
                          **{"run.workers": 4})
        for name in (RETRIEVAL_FILE, GENERATIONS_FILE, REPORT_FILE):
            assert (r1.run_dir / name).read_bytes() == (r4.run_dir / name).read_bytes()

    def test_golden_context_citation_faithful_ceiling(self, tmp_path, corpus_path,
                                                      dataset_path, fewshot_path, corpus):
        _, result = self._run(
            tmp_path, corpus_path, dataset_path, fewshot_path, corpus,
            **{"run.mode": "golden_context", "generator.kind": "citation_faithful"})
        e2e = result.report["e2e"]
        assert e2e["e2e_precision"]["micro"] == 1.0
        assert e2e["e2e_recall"]["micro"] == 1.0
        assert e2e["e2e_f1"]["micro"] == 1.0
        retrieval = result.report["retrieval"]["metrics"]
        for metric, cell in retrieval["3"].items():
            assert cell["aggregate"] == 1.0, metric

    def test_parametric_produces_no_retrieval_artifact(self, tmp_path, corpus_path,
                                                       dataset_path, fewshot_path, corpus):
        _, result = self._run(tmp_path, corpus_path, dataset_path, fewshot_path, corpus,
                              **{"run.mode": "parametric"})
        assert not (result.run_dir / RETRIEVAL_FILE).exists()
        assert "retrieval" not in result.report

    def test_every_other_mode_one_rankedlist_per_entry(self, tmp_path, corpus_path,
                                                       dataset_path, fewshot_path, corpus):
        for mode in ("naive_rag", "structured_rag", "golden_context", "long_context"):
            overrides = {"run.mode": mode}
            if mode == "naive_rag":
                overrides.update({"chunking.strategy": "line", "chunking.chunk_size": 200,
                                  "chunking.chunk_overlap": 50})
            _, result = self._run(tmp_path / mode, corpus_path, dataset_path,
                                  fewshot_path, corpus, **overrides)
            lines = (result.run_dir / RETRIEVAL_FILE).read_text().splitlines()
            assert len(lines) == 5, mode

    def test_error_budget_marks_run_failed(self, tmp_path, corpus_path, dataset_path,
                                           fewshot_path, corpus):
        # Unresolved positives make golden-context entries fail one by one.
        rows = [dict(r) for r in DATASET_ROWS]
        for row in rows[:3]:
            row["positives"] = [{"law": "zz", "number": "1"}]
        bad_path = write_jsonl(tmp_path / "bad.jsonl", rows)
        config = base_config(
            tmp_path, corpus_path, bad_path, fewshot_path,
            **{"run.mode": "golden_context", "run.error_threshold": 0.2})
        dataset = load_dataset(bad_path, corpus)
        pool = load_dataset(fewshot_path, corpus)
        result = run_benchmark(config, corpus, dataset, pool)
        assert result.status == "failed"
        assert len(result.failed_entries) == 3

    def test_stratified_subsample_in_run(self, tmp_path, corpus_path, dataset_path,
                                         fewshot_path, corpus):
        config, result = self._run(tmp_path, corpus_path, dataset_path, fewshot_path, corpus,
                                   **{"run.sample": {"fraction": 0.5, "stratify": True}})
        dataset = load_dataset(dataset_path, corpus)
        expected = stratified_sample(dataset, 0.5, config.seed, True)
        assert result.report["entries"] == len(expected) < 5
        # scoring samples the same subset: one generation per sampled entry
        lines = (result.run_dir / GENERATIONS_FILE).read_text().splitlines()
        assert {json.loads(l)["query_id"] for l in lines} == {e.query_id for e in expected}

    def test_augmented_run_combined_list_is_artifact(self, tmp_path, corpus_path,
                                                     dataset_path, fewshot_path, corpus):
        _, plain = self._run(tmp_path / "plain", corpus_path, dataset_path,
                             fewshot_path, corpus)
        _, augmented = self._run(tmp_path / "aug", corpus_path, dataset_path,
                                 fewshot_path, corpus,
                                 **{"augment.enabled": True, "augment.max_depth": 1})
        def ids_of(result, qid):
            for line in (result.run_dir / RETRIEVAL_FILE).read_text().splitlines():
                obj = json.loads(line)
                if obj["query_id"] == qid:
                    return [item["doc_id"] for item in obj["items"]]
            raise AssertionError(qid)

        for qid in ("q1", "q2", "q3", "q4", "q5"):
            base = ids_of(plain, qid)
            combined = ids_of(augmented, qid)
            # input is a subsequence of the augmented artifact
            positions = [combined.index(d) for d in base]
            assert positions == sorted(positions)
        # q3 retrieves ccc:1409, whose references join the combined list
        assert set(ids_of(augmented, "q3")) > set(ids_of(plain, "q3"))

    def test_generation_record_roundtrips_enums(self):
        from lexrag.evaluation import GenerationRecord
        for mode in ("parametric", "naive_rag", "structured_rag",
                     "golden_context", "long_context"):
            rec = GenerationRecord(
                query_id="q", answer_text="a", citations=(),
                raw_model_output="raw", mode=mode, flags=("parse_error",),
            )
            assert GenerationRecord.from_obj(rec.to_obj()) == rec

    def test_fewshot_pool_required_and_disjoint(self, tmp_path, corpus_path, dataset_path,
                                                fewshot_path, corpus):
        config = base_config(tmp_path, corpus_path, dataset_path, fewshot_path)
        dataset = load_dataset(dataset_path, corpus)
        with pytest.raises(ConfigError):
            run_benchmark(config, corpus, dataset, [])
        with pytest.raises(ConfigError):
            run_benchmark(config, corpus, dataset, dataset)


class TestScore:
    def test_rescore_reproduces_report_with_endpoints_down(
            self, tmp_path, corpus_path, dataset_path, fewshot_path, corpus, monkeypatch):
        config = base_config(tmp_path, corpus_path, dataset_path, fewshot_path)
        dataset = load_dataset(dataset_path, corpus)
        pool = load_dataset(fewshot_path, corpus)
        result = run_benchmark(config, corpus, dataset, pool)
        original = (result.run_dir / REPORT_FILE).read_bytes()

        # Same config; every endpoint is now unreachable. Re-scoring must not
        # touch any of them because judgments are persisted.
        def down(*_args, **_kwargs):
            raise AssertionError("endpoint constructed during offline re-score")

        monkeypatch.setattr("lexrag.harness.make_generator", down)
        monkeypatch.setattr("lexrag.clients.HttpEndpoint.post", down)
        rescored = score(config, corpus, dataset)
        assert (rescored.run_dir / REPORT_FILE).read_bytes() == original

    def test_unreachable_generator_cannot_even_be_called(self):
        with pytest.raises(Exception):
            UnreachableClient().complete("x")
