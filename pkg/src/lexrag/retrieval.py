"""Retriever contract and concrete rankers.

Two local retrievers — Okapi BM25 over chunks and a multi-head embedding
retriever with weighted score fusion — plus an adapter that prompts a
long-context generator with the whole corpus and parses the ids it emits.
All rankers are deterministic given (inputs, config); ties break by
ascending doc id.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence, TextIO

import numpy as np

from .corpus import Corpus, SectionId, SectionIdError
from .errors import StructuralError, UsageError

logger = logging.getLogger(__name__)

Tokenizer = Callable[[str], list[str]]


@dataclass(frozen=True)
class RankedList:
    """Ordered retrieved document ids with scores for one query."""

    query_id: str
    items: tuple[tuple[str, float], ...]
    k: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ids = [d for d, _ in self.items]
        if len(ids) != len(set(ids)):
            raise StructuralError(f"ranked list {self.query_id!r} has duplicate doc ids")
        scores = [s for _, s in self.items]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise StructuralError(f"ranked list {self.query_id!r} scores increase")

    @property
    def ids(self) -> list[str]:
        return [d for d, _ in self.items]

    def top(self, k: int | None = None) -> list[str]:
        return self.ids if k is None else self.ids[:k]

    def to_obj(self) -> dict:
        return {
            "query_id": self.query_id,
            "k": self.k,
            "items": [{"doc_id": d, "score": s} for d, s in self.items],
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "RankedList":
        return cls(
            query_id=obj["query_id"],
            items=tuple((it["doc_id"], float(it["score"])) for it in obj["items"]),
            k=int(obj.get("k", len(obj["items"]))),
        )


def dump_runs_jsonl(runs: Iterable[RankedList], fp: TextIO) -> None:
    for run in runs:
        fp.write(json.dumps(run.to_obj(), ensure_ascii=False, sort_keys=True))
        fp.write("\n")


def load_runs_jsonl(fp: Iterable[str]) -> list[RankedList]:
    return [RankedList.from_obj(json.loads(line)) for line in fp if line.strip()]


# ----------------------------------------------------------------------
# Tokenizers
# ----------------------------------------------------------------------

def whitespace_tokenizer(text: str) -> list[str]:
    return text.lower().split()


def char_ngram_tokenizer(n: int = 3) -> Tokenizer:
    """Character n-gram fallback for scripts without word delimiters."""

    def tokenize(text: str) -> list[str]:
        squeezed = "".join(text.lower().split())
        if not squeezed:
            return []
        if len(squeezed) <= n:
            return [squeezed]
        return [squeezed[i:i + n] for i in range(len(squeezed) - n + 1)]

    return tokenize


TOKENIZERS: dict[str, Tokenizer] = {
    "whitespace": whitespace_tokenizer,
    "char3": char_ngram_tokenizer(3),
}


# ----------------------------------------------------------------------
# BM25
# ----------------------------------------------------------------------

@dataclass
class Index:
    """Per-document term statistics for BM25 ranking."""

    doc_ids: tuple[str, ...]
    term_freqs: tuple[Counter, ...]
    doc_lens: tuple[int, ...]
    df: Counter
    avgdl: float
    tokenizer: Tokenizer = field(compare=False, default=whitespace_tokenizer)
    empty_docs: tuple[str, ...] = ()

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)


def build_index(chunks: Sequence, tokenizer: Tokenizer = whitespace_tokenizer) -> Index:
    """Index a chunk set. Empty-token documents are allowed but flagged."""
    if not chunks:
        raise UsageError("cannot index an empty chunk set")
    doc_ids = []
    term_freqs = []
    doc_lens = []
    df: Counter = Counter()
    empty = []
    for chunk in chunks:
        tokens = tokenizer(chunk.text)
        doc_ids.append(chunk.chunk_id)
        tf = Counter(tokens)
        term_freqs.append(tf)
        doc_lens.append(len(tokens))
        df.update(tf.keys())
        if not tokens:
            empty.append(chunk.chunk_id)
    if empty:
        logger.warning("%d documents produced no tokens", len(empty))
    return Index(
        doc_ids=tuple(doc_ids),
        term_freqs=tuple(term_freqs),
        doc_lens=tuple(doc_lens),
        df=df,
        avgdl=sum(doc_lens) / len(doc_lens),
        tokenizer=tokenizer,
        empty_docs=tuple(empty),
    )


def bm25_idf(n_docs: int, df: int) -> float:
    # Nonnegative "+1" form of the Okapi idf.
    return math.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)


def bm25_rank(
    index: Index,
    query: str,
    k: int,
    *,
    k1: float = 1.5,
    b: float = 0.75,
    query_id: str = "",
) -> RankedList:
    """Okapi BM25 over the index; exactly min(k, corpus size) items.

    A query with no tokens (or none appearing in the corpus) yields an empty
    ranked list — a degenerate query, not a failure.
    """
    if k < 1:
        raise UsageError("k must be >= 1")
    tokens = [t for t in index.tokenizer(query) if t in index.df]
    if not tokens:
        return RankedList(query_id=query_id, items=(), k=k)
    scores = []
    for i in range(index.n_docs):
        tf = index.term_freqs[i]
        if index.avgdl > 0:
            norm = k1 * (1 - b + b * index.doc_lens[i] / index.avgdl)
        else:
            norm = k1
        s = 0.0
        for t in tokens:
            f = tf.get(t, 0)
            if f:
                s += bm25_idf(index.n_docs, index.df[t]) * f * (k1 + 1) / (f + norm)
        scores.append(s)
    order = sorted(range(index.n_docs), key=lambda i: (-scores[i], index.doc_ids[i]))
    top = order[: min(k, index.n_docs)]
    return RankedList(
        query_id=query_id,
        items=tuple((index.doc_ids[i], scores[i]) for i in top),
        k=k,
    )


# ----------------------------------------------------------------------
# Multi-head embedding fusion
# ----------------------------------------------------------------------

@dataclass
class EmbeddingStore:
    """Per-head vector tables plus fusion weights.

    Dense-style heads hold one vector per document (cosine similarity);
    sparse heads hold {term: weight} maps (dot product over shared terms).
    """

    dense: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    sparse: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for head, w in self.weights.items():
            if not (math.isfinite(w) and w >= 0):
                raise StructuralError(f"head {head!r} has invalid weight {w!r}")
        for head, table in self.dense.items():
            dims = {v.shape for v in table.values()}
            if len(dims) > 1:
                raise StructuralError(f"head {head!r} mixes vector dimensions {dims}")

    def heads(self) -> list[str]:
        return sorted(set(self.dense) | set(self.sparse))

    def doc_ids(self) -> list[str]:
        ids: set[str] = set()
        for table in self.dense.values():
            ids.update(table)
        for table in self.sparse.values():
            ids.update(table)
        return sorted(ids)

    @classmethod
    def from_records(
        cls, records: Iterable[dict], weights: Mapping[str, float]
    ) -> "EmbeddingStore":
        """Build from JSONL records {doc_id, head, vector|sparse}."""
        store = cls(weights=dict(weights))
        for obj in records:
            head = obj["head"]
            if "vector" in obj:
                store.dense.setdefault(head, {})[obj["doc_id"]] = np.asarray(
                    obj["vector"], dtype=np.float64
                )
            elif "sparse" in obj:
                store.sparse.setdefault(head, {})[obj["doc_id"]] = {
                    t: float(w) for t, w in obj["sparse"].items()
                }
            else:
                raise StructuralError(f"embedding record without vector/sparse: {obj}")
        store.__post_init__()
        return store


def _cosine_scores(
    table: dict[str, np.ndarray], q: np.ndarray
) -> dict[str, float]:
    ids = sorted(table)
    mat = np.stack([table[d] for d in ids])
    if q.shape != mat.shape[1:]:
        raise StructuralError(
            f"query dimension {q.shape} != head dimension {mat.shape[1:]}"
        )
    qn = np.linalg.norm(q)
    dn = np.linalg.norm(mat, axis=1)
    denom = qn * dn
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where(denom > 0, mat @ q / denom, 0.0)
    return dict(zip(ids, sims.tolist()))


def _sparse_scores(
    table: dict[str, dict[str, float]], q: Mapping[str, float]
) -> dict[str, float]:
    out = {}
    for doc_id, terms in table.items():
        out[doc_id] = sum(w * terms[t] for t, w in q.items() if t in terms)
    return out


def fused_rank(
    store: EmbeddingStore,
    query_vectors: Mapping[str, object],
    k: int,
    *,
    query_id: str = "",
) -> RankedList:
    """Weighted sum of per-head similarities: score(d) = Σ_h w_h · sim_h(q, d).

    The query must provide a vector for every head with nonzero weight.
    Documents missing from a head contribute zero for that head.
    """
    if k < 1:
        raise UsageError("k must be >= 1")
    totals: dict[str, float] = {d: 0.0 for d in store.doc_ids()}
    for head in sorted(store.weights):
        w = store.weights[head]
        if w == 0:
            continue
        if head not in query_vectors:
            raise UsageError(f"query provides no vector for weighted head {head!r}")
        if head in store.dense:
            sims = _cosine_scores(store.dense[head], np.asarray(query_vectors[head], dtype=np.float64))
        elif head in store.sparse:
            q = query_vectors[head]
            if not isinstance(q, Mapping):
                raise StructuralError(f"sparse head {head!r} needs a term->weight query")
            sims = _sparse_scores(store.sparse[head], q)
        else:
            raise StructuralError(f"weighted head {head!r} has no stored vectors")
        for doc_id, sim in sims.items():
            totals[doc_id] += w * sim
    order = sorted(totals, key=lambda d: (-totals[d], d))
    top = order[: min(k, len(order))]
    return RankedList(
        query_id=query_id, items=tuple((d, totals[d]) for d in top), k=k
    )


def load_embeddings_jsonl(fp: Iterable[str], weights: Mapping[str, float]) -> EmbeddingStore:
    return EmbeddingStore.from_records(
        (json.loads(line) for line in fp if line.strip()), weights
    )


# ----------------------------------------------------------------------
# Long-context model as retriever
# ----------------------------------------------------------------------

# Identifier token wrapped around canonical section keys when a corpus is
# serialized into a prompt, and expected back in model output.
ID_TOKEN_RE = re.compile(r"\[\[([^\[\]]+)\]\]")


def section_token(sid: SectionId) -> str:
    return f"[[{sid.key()}]]"


def serialize_sections(records: Iterable) -> str:
    """Render sections with identifier tokens and hierarchy headers."""
    blocks = []
    for rec in records:
        header = section_token(rec.id)
        if rec.hierarchy_path:
            header += " (" + " > ".join(f"{lvl} {lab}" for lvl, lab in rec.hierarchy_path) + ")"
        blocks.append(f"{header}\n{rec.text}")
    return "\n\n".join(blocks)


DEFAULT_LCLM_PROMPT = (
    "You are given an entire legal corpus. Each section starts with an\n"
    "identifier token like [[law:number]].\n\n{corpus}\n\n"
    "List the identifier tokens of the {k} sections most relevant to the\n"
    "question, one per line, most relevant first.\nQuestion: {query}\n"
)


def lclm_retrieve(
    client,
    corpus: Corpus,
    query: str,
    k: int,
    prompt: str = DEFAULT_LCLM_PROMPT,
    *,
    query_id: str = "",
) -> RankedList:
    """Prompt a long-context generator with the whole corpus and parse the
    emitted identifier tokens into a ranked list (scores 1/rank).

    Unparseable or hallucinated ids are dropped and counted in ``meta``;
    fitting the serialized corpus into the model context is caller-checked.
    """
    if k < 1:
        raise UsageError("k must be >= 1")
    rendered = prompt.format(corpus=serialize_sections(corpus.in_order()), query=query, k=k)
    text = client.complete(rendered)
    items: list[tuple[str, float]] = []
    seen: set[str] = set()
    dropped = 0
    for raw in ID_TOKEN_RE.findall(text):
        if len(items) >= k:
            break
        try:
            sid = SectionId.from_key(raw)
        except SectionIdError:
            dropped += 1
            continue
        key = sid.key()
        if sid not in corpus.sections:
            dropped += 1
            continue
        if key in seen:
            continue
        seen.add(key)
        items.append((key, 1.0 / (len(items) + 1)))
    meta = {"dropped": dropped}
    if not items:
        meta["diagnostic"] = "no parseable section ids in model output"
        logger.warning("lclm retrieval for %r parsed no ids", query_id or query[:40])
    return RankedList(query_id=query_id, items=tuple(items), k=k, meta=meta)
