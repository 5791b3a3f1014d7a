"""End-to-end orchestration: dataset ingestion, context assembly, few-shot
prompt construction, generator calls, structured-output parsing, artifact
persistence and offline re-scoring.

Artifacts are persisted before scoring and are sufficient on their own:
re-scoring a run never calls the generator again (the judge is called once
and its verdicts are persisted too, so a re-score is fully offline).
"""

from __future__ import annotations

import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import chunking as chunking_mod
from . import refgraph as refgraph_mod
from .clients import make_generator, make_judge
from .config import RunConfig
from .corpus import Corpus, SectionId, SectionIdError, extract_references
from .errors import ConfigError, ParseError, RunError
from .evaluation import (
    GenerationRecord, JudgeVerdict, build_e2e_report, judge as judge_op,
)
from .metrics import EvalEntry, evaluate_runs
from .retrieval import (
    ID_TOKEN_RE, RankedList, TOKENIZERS, build_index, bm25_rank, fused_rank,
    lclm_retrieve, load_embeddings_jsonl, section_token, serialize_sections,
)

logger = logging.getLogger(__name__)

RETRIEVAL_FILE = "retrieval.jsonl"
GENERATIONS_FILE = "generations.jsonl"
JUDGMENTS_FILE = "judgments.jsonl"
ERRORS_FILE = "errors.jsonl"
PER_ENTRY_FILE = "e2e_per_entry.jsonl"
REPORT_FILE = "report.json"


# ----------------------------------------------------------------------
# Dataset loading
# ----------------------------------------------------------------------

def load_dataset(path, corpus: Corpus | None = None) -> list[EvalEntry]:
    """Load dataset JSONL {query_id, question, positives[], answer}.

    Positives are normalized; entries duplicating an earlier question are
    dropped with a warning; positives that do not resolve in ``corpus`` are
    kept and flagged unresolved.
    """
    entries: list[EvalEntry] = []
    seen_questions: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc}", line=lineno) from exc
            try:
                query_id = str(obj["query_id"])
                question = obj["question"]
                raw_positives = obj["positives"]
                answer = obj["answer"]
            except KeyError as exc:
                raise ParseError(f"dataset entry missing field {exc}", line=lineno) from exc
            if not isinstance(raw_positives, list) or not raw_positives:
                raise ParseError("positives must be a non-empty list", line=lineno)
            positives: list[SectionId] = []
            for p in raw_positives:
                try:
                    sid = SectionId(p["law"], str(p["number"]), p.get("suffix"))
                except (KeyError, TypeError, SectionIdError) as exc:
                    raise ParseError(f"bad positive {p!r}: {exc}", line=lineno) from exc
                if sid not in positives:
                    positives.append(sid)
                else:
                    logger.warning("line %d: duplicate positive %s dropped", lineno, sid.key())
            if question in seen_questions:
                logger.warning(
                    "line %d: duplicate question of entry %s dropped",
                    lineno, seen_questions[question],
                )
                continue
            seen_questions[question] = query_id
            unresolved = tuple(
                sid for sid in positives if corpus is not None and sid not in corpus.sections
            )
            entries.append(EvalEntry(
                query_id=query_id,
                query=question,
                positives=tuple(positives),
                gold_answer=answer,
                unresolved=unresolved,
            ))
    return entries


def check_fewshot_disjoint(pool: Sequence[EvalEntry], entries: Sequence[EvalEntry]) -> None:
    ids = {e.query_id for e in entries} & {e.query_id for e in pool}
    questions = {e.query for e in entries} & {e.query for e in pool}
    if ids or questions:
        raise ConfigError(
            f"few-shot pool overlaps evaluated entries "
            f"(ids: {sorted(ids)[:3]}, questions: {len(questions)})"
        )


def stratified_sample(
    entries: Sequence[EvalEntry], fraction: float, seed: int, stratify: bool = True
) -> list[EvalEntry]:
    """Seeded subsample, stratified by the legislation of the first positive.
    Every stratum keeps at least one entry."""
    if fraction >= 1.0:
        return list(entries)
    rng = random.Random(seed)
    groups: dict[str, list[EvalEntry]] = {}
    for e in entries:
        key = e.positives[0].law if stratify else "all"
        groups.setdefault(key, []).append(e)
    chosen: list[EvalEntry] = []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda e: e.query_id)
        take = max(1, round(fraction * len(members)))
        chosen.extend(rng.sample(members, take))
    return sorted(chosen, key=lambda e: e.query_id)


# ----------------------------------------------------------------------
# Prompt construction
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class PromptBundle:
    """Everything the generator sees; ``render`` makes the single prompt
    string with identifier tokens around each context section."""

    system: str
    exemplars: tuple[tuple[str, str, str], ...]  # (question, context_text, answer_block)
    question: str
    context_sections: tuple

    def render(self) -> str:
        parts = [self.system.rstrip()]
        for q, ctx, ans in self.exemplars:
            parts.append(f"Example:\nContext:\n{ctx}\nQuestion: {q}\n{ans}")
        if self.context_sections:
            context = serialize_sections(self.context_sections)
        else:
            context = "(none)"
        parts.append(f"Context:\n{context}\nQuestion: {self.question}\nANSWER:")
        return "\n\n".join(parts)


def _answer_block(entry: EvalEntry) -> str:
    citations = "\n".join(f"{section_token(sid)}" for sid in entry.positives)
    return f"ANSWER:\n{entry.gold_answer}\n\nCITATIONS:\n{citations}"


def build_exemplars(
    pool: Sequence[EvalEntry], corpus: Corpus, count: int, seed: int, with_context: bool
) -> tuple[tuple[str, str, str], ...]:
    """Few-shot exemplars: question, golden context (resolved positives) and
    a contract-formatted answer block. Parametric runs omit the context."""
    if count == 0:
        return ()
    if len(pool) < count:
        raise ConfigError(f"few-shot pool has {len(pool)} entries, need {count}")
    rng = random.Random(seed)
    picked = rng.sample(sorted(pool, key=lambda e: e.query_id), count)
    exemplars = []
    for entry in picked:
        if with_context:
            records = [corpus.sections[sid] for sid in entry.positives if sid in corpus.sections]
            ctx = serialize_sections(records) if records else "(none)"
        else:
            ctx = "(none)"
        exemplars.append((entry.query, ctx, _answer_block(entry)))
    return tuple(exemplars)


# ----------------------------------------------------------------------
# Context assembly
# ----------------------------------------------------------------------

class Retriever:
    """Bundles the configured ranker with the chunk set it ranks over."""

    def __init__(self, config: RunConfig, corpus: Corpus, chunks: list):
        self.config = config
        self.corpus = corpus
        self.chunks = chunks
        self.kind = config.retriever.kind
        self._index = None
        self._store = None
        self._query_vectors: dict[str, dict] = {}
        self._lclm = None
        if self.kind == "bm25":
            self._index = build_index(chunks, TOKENIZERS[config.retriever.tokenizer])
        elif self.kind == "fused":
            emb = config.path("embeddings")
            with open(emb, "r", encoding="utf-8") as fp:
                self._store = load_embeddings_jsonl(fp, config.retriever.weights)
            qemb = config.path("query_embeddings")
            with open(qemb, "r", encoding="utf-8") as fp:
                for line in fp:
                    if not line.strip():
                        continue
                    obj = json.loads(line)
                    vecs = self._query_vectors.setdefault(obj["doc_id"], {})
                    vecs[obj["head"]] = obj.get("vector", obj.get("sparse"))
        elif self.kind == "lclm":
            self._lclm = make_generator(config.generator)

    def rank_chunks(self, entry: EvalEntry, k: int) -> RankedList:
        if self.kind == "bm25":
            r = self.config.retriever
            return bm25_rank(
                self._index, entry.query, k, k1=r.k1, b=r.b, query_id=entry.query_id
            )
        if self.kind == "fused":
            vectors = self._query_vectors.get(entry.query_id)
            if vectors is None:
                raise RunError(f"no query embeddings for {entry.query_id!r}")
            return fused_rank(self._store, vectors, k, query_id=entry.query_id)
        raise ConfigError(f"retriever kind {self.kind!r} does not rank chunks")

    def rank_sections(self, entry: EvalEntry, k: int) -> RankedList:
        """Ranked section keys: chunk ranking mapped through chunk metadata,
        or direct section ids for the long-context retriever."""
        if self.kind == "lclm":
            return lclm_retrieve(
                self._lclm, self.corpus, entry.query, k,
                self.config.prompts.lclm, query_id=entry.query_id,
            )
        ranked = self.rank_chunks(entry, k)
        return chunking_mod.map_chunks_to_sections(ranked, self.chunks)


def build_chunks(config: RunConfig, corpus: Corpus) -> list:
    """The chunk set a run retrieves over. Naive strategies are filtered to
    chunks that fully cover at least one section before retrieval."""
    chunks = chunking_mod.chunk_corpus(corpus, config.chunking)
    if config.chunking.strategy != "hierarchy_aware":
        chunks = chunking_mod.filter_full_cover(chunks)
    return chunks


def assemble_context(
    entry: EvalEntry,
    config: RunConfig,
    corpus: Corpus,
    retriever: Retriever | None,
    graph: refgraph_mod.ReferenceGraph | None,
) -> tuple[list, RankedList | None]:
    """Context sections for one entry plus the retrieval artifact.

    parametric — empty; naive_rag — sections fully covered by the top-k
    chunks; structured_rag — top-k sections, augmented when enabled;
    golden_context — exactly the positives; long_context — the whole corpus.
    """
    mode = config.mode
    if mode == "parametric":
        return [], None
    if mode == "golden_context":
        if entry.unresolved:
            raise RunError(
                f"golden context for {entry.query_id} has unresolved positives: "
                f"{[s.key() for s in entry.unresolved]}"
            )
        ranked = RankedList(
            query_id=entry.query_id,
            items=tuple((sid.key(), 1.0 / (i + 1)) for i, sid in enumerate(entry.positives)),
            k=len(entry.positives),
        )
        return [corpus.sections[sid] for sid in entry.positives], ranked
    if mode == "long_context":
        records = corpus.in_order()
        ranked = RankedList(
            query_id=entry.query_id,
            items=tuple((rec.id.key(), 1.0 / (i + 1)) for i, rec in enumerate(records)),
            k=len(records),
        )
        return records, ranked
    if retriever is None:
        raise ConfigError(f"mode {mode!r} needs a retriever")
    want_k = config.top_k
    if retriever.kind == "lclm":
        want_k = max(config.top_k, config.retriever.lclm_k)
    ranked = retriever.rank_sections(entry, want_k)
    if mode == "structured_rag" and config.augment_enabled:
        if graph is None:
            raise ConfigError("augmentation enabled but no reference graph given")
        # Metrics use the combined (augmented) list, so it becomes the artifact.
        prefix = RankedList(
            query_id=ranked.query_id, items=ranked.items[:config.top_k], k=config.top_k
        )
        ranked = refgraph_mod.augment(prefix, graph, config.augment)
        context_keys = ranked.ids
    elif retriever.kind == "lclm":
        # The long-context retriever emits more ids than go into the prompt.
        context_keys = ranked.ids[:config.top_k]
    else:
        context_keys = ranked.ids
    records = [
        corpus.sections[SectionId.from_key(key)]
        for key in context_keys
        if SectionId.from_key(key) in corpus.sections
    ]
    return records, ranked


# ----------------------------------------------------------------------
# Generation and structured-output parsing
# ----------------------------------------------------------------------

_CONTRACT_RE = re.compile(
    r"ANSWER:\s*(?P<answer>.*?)\s*CITATIONS:\s*(?P<citations>.*)",
    re.DOTALL | re.IGNORECASE,
)

_REFORMAT_SUFFIX = (
    "\n\nYour previous reply did not follow the required format. Respond again"
    " with exactly:\nANSWER:\n<answer>\n\nCITATIONS:\n[[law:number]] tokens, one"
    " per line."
)


def parse_generation(text: str) -> tuple[str, list[SectionId], list[str]]:
    """Parse the structured output contract.

    Returns (answer, citations, flags); flags collect contract violations
    (missing blocks, malformed citation tokens) without failing the entry.
    """
    flags: list[str] = []
    m = _CONTRACT_RE.search(text)
    if not m:
        return text.strip(), [], ["missing_citation_block"]
    answer = m.group("answer").strip()
    citations: list[SectionId] = []
    for raw in ID_TOKEN_RE.findall(m.group("citations")):
        try:
            sid = SectionId.from_key(raw)
        except SectionIdError:
            if "bad_citation_token" not in flags:
                flags.append("bad_citation_token")
            continue
        if sid not in citations:
            citations.append(sid)
    return answer, citations, flags


def generate(
    bundle: PromptBundle,
    client,
    *,
    query_id: str,
    mode: str,
    corpus: Corpus | None = None,
    freetext_fallback: bool = False,
) -> GenerationRecord:
    """Call the generator and parse its structured output.

    A contract violation triggers one reformat retry; if that still fails the
    record carries a parse flag (and, behind the ``freetext_fallback`` flag,
    citations harvested from free text instead of the citation block).
    """
    prompt = bundle.render()
    raw = client.complete(prompt)
    answer, citations, flags = parse_generation(raw)
    if "missing_citation_block" in flags:
        raw_retry = client.complete(prompt + _REFORMAT_SUFFIX)
        answer2, citations2, flags2 = parse_generation(raw_retry)
        if "missing_citation_block" not in flags2:
            raw, answer, citations, flags = raw_retry, answer2, citations2, flags2
        else:
            flags = sorted(set(flags) | {"parse_error"})
            if freetext_fallback and corpus is not None:
                default_law = next(iter(corpus.codes), "unknown")
                citations = extract_references(raw, default_law, corpus.rules)
                flags.append("freetext_citations")
    return GenerationRecord(
        query_id=query_id,
        answer_text=answer,
        citations=tuple(citations),
        raw_model_output=raw,
        mode=mode,
        flags=tuple(flags),
    )


# ----------------------------------------------------------------------
# Run + score
# ----------------------------------------------------------------------

@dataclass
class RunResult:
    run_dir: Path
    status: str
    report: dict
    failed_entries: list[dict]


def _write_jsonl(path: Path, objs: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        for obj in objs:
            fp.write(json.dumps(obj, ensure_ascii=False, sort_keys=True))
            fp.write("\n")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fp:
        return [json.loads(line) for line in fp if line.strip()]


def run_benchmark(
    config: RunConfig,
    corpus: Corpus,
    dataset: Sequence[EvalEntry],
    fewshot_pool: Sequence[EvalEntry] = (),
) -> RunResult:
    """Execute one end-to-end run and persist all artifacts before scoring.

    Per-entry failures never abort the run; the run is marked failed when the
    error ratio exceeds ``config.error_threshold``.
    """
    run_dir = config.path("run_dir")
    run_dir.mkdir(parents=True, exist_ok=True)

    entries = list(dataset)
    if config.sample is not None:
        entries = stratified_sample(
            entries, config.sample.fraction, config.seed, config.sample.stratify
        )
    if config.few_shot > 0:
        if not fewshot_pool:
            raise ConfigError("few_shot > 0 but no few-shot pool given")
        check_fewshot_disjoint(fewshot_pool, entries)
    exemplars = build_exemplars(
        fewshot_pool, corpus, config.few_shot, config.seed,
        with_context=config.mode != "parametric",
    )

    retriever: Retriever | None = None
    if config.mode in ("naive_rag", "structured_rag"):
        chunks = build_chunks(config, corpus)
        retriever = Retriever(config, corpus, chunks)
    graph = None
    if config.augment_enabled:
        graph = refgraph_mod.build_graph(corpus)
    generator = make_generator(config.generator)

    def process(entry: EvalEntry):
        try:
            records, ranked = assemble_context(entry, config, corpus, retriever, graph)
            bundle = PromptBundle(
                system=config.prompts.system,
                exemplars=exemplars,
                question=entry.query,
                context_sections=tuple(records),
            )
            record = generate(
                bundle, generator, query_id=entry.query_id, mode=config.mode,
                corpus=corpus, freetext_fallback=config.freetext_citations,
            )
            return entry.query_id, ranked, record, None
        except Exception as exc:  # per-entry isolation: a failure never aborts the run
            logger.error("entry %s failed: %s", entry.query_id, exc)
            return entry.query_id, None, None, f"{type(exc).__name__}: {exc}"

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(process, entries))
    else:
        results = [process(e) for e in entries]
    results.sort(key=lambda r: r[0])

    runs = [r for _, r, _, _ in results if r is not None]
    records = [g for _, _, g, _ in results if g is not None]
    errors = [
        {"query_id": qid, "stage": "generate", "error": err}
        for qid, _, _, err in results
        if err is not None
    ]
    if config.mode != "parametric":
        _write_jsonl(run_dir / RETRIEVAL_FILE, (r.to_obj() for r in runs))
    _write_jsonl(run_dir / GENERATIONS_FILE, (g.to_obj() for g in records))
    _write_jsonl(run_dir / ERRORS_FILE, errors)

    # score() re-derives the same sample from the full dataset (same seed).
    return score(config, corpus, dataset)


def _load_or_make_judgments(
    config: RunConfig,
    entries: Sequence[EvalEntry],
    records: Mapping[str, GenerationRecord],
    run_dir: Path,
) -> dict[str, JudgeVerdict | None]:
    path = run_dir / JUDGMENTS_FILE
    if path.exists():
        verdicts: dict[str, JudgeVerdict | None] = {}
        for obj in _read_jsonl(path):
            if obj.get("error"):
                verdicts[obj["query_id"]] = None
            else:
                verdicts[obj["query_id"]] = JudgeVerdict(
                    coverage=obj["coverage"],
                    contradiction=obj["contradiction"],
                    rationale=obj.get("rationale"),
                )
        return verdicts
    if config.judge.kind == "none":
        return {}
    client = make_judge(config.judge)
    by_id = {e.query_id: e for e in entries}

    def assess(query_id: str):
        entry = by_id[query_id]
        record = records[query_id]
        try:
            verdict = judge_op(
                entry, record, client, config.prompts.judge, retries=config.judge.retries
            )
            return query_id, verdict, None
        except Exception as exc:  # verdict errors are recorded per entry
            logger.error("judge failed for %s: %s", query_id, exc)
            return query_id, None, str(exc)

    ids = sorted(records)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(assess, ids))
    else:
        results = [assess(qid) for qid in ids]
    results.sort(key=lambda r: r[0])
    rows = []
    verdicts = {}
    for query_id, verdict, error in results:
        if verdict is None:
            rows.append({"query_id": query_id, "error": error or "judge_error"})
        else:
            rows.append({"query_id": query_id, **verdict.to_obj()})
        verdicts[query_id] = verdict
    _write_jsonl(run_dir / JUDGMENTS_FILE, rows)
    return verdicts


def score(
    config: RunConfig,
    corpus: Corpus,
    dataset: Sequence[EvalEntry],
) -> RunResult:
    """(Re)compute all reports from persisted artifacts.

    Deterministic and offline except for the judge, which runs once; its
    verdicts persist next to the other artifacts, so scoring again reproduces
    the report byte-for-byte with every endpoint unreachable.
    """
    run_dir = config.path("run_dir")
    entries = list(dataset)
    if config.sample is not None:
        entries = stratified_sample(
            entries, config.sample.fraction, config.seed, config.sample.stratify
        )

    retrieval_path = run_dir / RETRIEVAL_FILE
    runs: dict[str, RankedList] = {}
    if retrieval_path.exists():
        for obj in _read_jsonl(retrieval_path):
            ranked = RankedList.from_obj(obj)
            runs[ranked.query_id] = ranked

    records: dict[str, GenerationRecord] = {}
    gen_path = run_dir / GENERATIONS_FILE
    if gen_path.exists():
        for obj in _read_jsonl(gen_path):
            rec = GenerationRecord.from_obj(obj)
            records[rec.query_id] = rec

    errors = _read_jsonl(run_dir / ERRORS_FILE) if (run_dir / ERRORS_FILE).exists() else []

    verdicts = _load_or_make_judgments(config, entries, records, run_dir)

    report: dict = {
        "config_hash": config.config_hash(),
        "mode": config.mode,
        "entries": len(entries),
    }
    retrieval_report = None
    if runs or config.mode != "parametric":
        retrieval_report = evaluate_runs(entries, runs, config.ks)
        report["retrieval"] = retrieval_report.to_obj(config.per_sample_reports)

    retr_recall_macro = None
    if retrieval_report is not None:
        k = config.analytics_k
        id_lists = [
            runs[e.query_id].ids[:k] if e.query_id in runs else [] for e in entries
        ]
        retr_recall_macro = (
            sum(
                len(e.positive_keys & set(ids)) / len(e.positive_keys)
                for e, ids in zip(entries, id_lists)
            ) / len(entries)
            if entries else None
        )

    e2e = build_e2e_report(entries, records, verdicts, retr_recall_macro)
    report["e2e"] = e2e.to_obj(config.per_sample_reports)
    _write_jsonl(run_dir / PER_ENTRY_FILE, e2e.per_entry)

    error_ratio = len(errors) / len(entries) if entries else 0.0
    status = "failed" if error_ratio > config.error_threshold else "ok"
    report["status"] = status
    report["errors"] = {"count": len(errors), "ratio": error_ratio}

    with open(run_dir / REPORT_FILE, "w", encoding="utf-8") as fp:
        json.dump(report, fp, ensure_ascii=False, sort_keys=True, indent=2)
        fp.write("\n")
    if status == "failed":
        logger.error(
            "run marked failed: %d/%d entries errored (threshold %.0f%%)",
            len(errors), len(entries), config.error_threshold * 100,
        )
    return RunResult(run_dir=run_dir, status=status, report=report, failed_entries=errors)
