"""Evaluation toolkit for legal QA RAG systems over structured legislation."""

from .chunking import Chunk, ChunkAudit, ChunkingSpec, audit_chunks, chunk_corpus
from .corpus import Corpus, LawCode, SectionId, SectionRecord, parse_corpus
from .evaluation import GenerationRecord, JudgeVerdict, citation_scores, judge_agreement
from .metrics import EvalEntry, evaluate_runs
from .refgraph import AugmentSpec, ReferenceGraph, augment, build_graph
from .retrieval import EmbeddingStore, Index, RankedList, bm25_rank, build_index, fused_rank

__version__ = "0.1.0"

__all__ = [
    "AugmentSpec",
    "Chunk",
    "ChunkAudit",
    "ChunkingSpec",
    "Corpus",
    "EmbeddingStore",
    "EvalEntry",
    "GenerationRecord",
    "Index",
    "JudgeVerdict",
    "LawCode",
    "RankedList",
    "ReferenceGraph",
    "SectionId",
    "SectionRecord",
    "augment",
    "audit_chunks",
    "bm25_rank",
    "build_graph",
    "build_index",
    "chunk_corpus",
    "citation_scores",
    "evaluate_runs",
    "fused_rank",
    "judge_agreement",
    "parse_corpus",
]
