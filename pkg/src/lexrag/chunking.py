"""Chunking strategies, the information-loss audit and chunk→section mapping.

Four strategies over the section model:

* ``character`` — fixed-size windows with overlap.
* ``line`` — packs whole lines up to the size budget; splits only at newlines.
* ``recursive`` — splits on an ordered separator list (blank line, newline,
  space) falling back to hard character cuts, then packs the pieces.
* ``hierarchy_aware`` — exactly one chunk per section, lossless by design.

Naive windows never cross law-code boundaries; each code is chunked
independently against the concatenation of its section texts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

from .corpus import Corpus, SectionId
from .errors import ConfigError, StructuralError
from .retrieval import RankedList

STRATEGIES = ("character", "recursive", "line", "hierarchy_aware")

# Minimum overlap (characters) between a chunk and a section body for the
# section to count as partially contained; shorter incidental overlaps are
# marker-fragment noise.
DEFAULT_PARTIAL_THRESHOLD = 30


@dataclass(frozen=True)
class ChunkingSpec:
    strategy: str
    chunk_size: int = 0
    chunk_overlap: int = 0
    partial_threshold: int = DEFAULT_PARTIAL_THRESHOLD

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown chunking strategy {self.strategy!r}")
        if self.strategy != "hierarchy_aware":
            if self.chunk_size <= 0:
                raise ConfigError("chunk_size must be > 0")
            if not 0 <= self.chunk_overlap < self.chunk_size:
                raise ConfigError("chunk_overlap must satisfy 0 <= overlap < chunk_size")


@dataclass(frozen=True)
class Chunk:
    """A contiguous text span plus the sections it covers fully/partially.

    ``covered_full``/``covered_partial`` are kept in document order so
    downstream expansion is deterministic. ``law`` and ``span`` (offsets into
    the per-code text) are bookkeeping, not part of the interchange schema.
    """

    chunk_id: str
    text: str
    covered_full: tuple[SectionId, ...]
    covered_partial: tuple[SectionId, ...]
    law: str | None = field(default=None, compare=False)
    span: tuple[int, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        if set(self.covered_full) & set(self.covered_partial):
            raise StructuralError(
                f"chunk {self.chunk_id}: covered_full and covered_partial overlap"
            )


def _chunk_id(strategy: str, law: str, start: int, end: int) -> str:
    key = f"{strategy}|{law}|{start}|{end}"
    return hashlib.sha1(key.encode("utf-8")).hexdigest()[:16]


def code_text_and_spans(
    corpus: Corpus, law: str
) -> tuple[str, list[tuple[SectionId, int, int]]]:
    """Concatenate a code's section texts (newline-joined, document order)
    and return each section's [start, end) span in the result."""
    spans = []
    pieces = []
    pos = 0
    for rec in corpus.sections_of(law):
        if pieces:
            pos += 1  # separating newline
        start = pos
        pieces.append(rec.text)
        pos += len(rec.text)
        spans.append((rec.id, start, pos))
    return "\n".join(pieces), spans


# ----------------------------------------------------------------------
# Window generation
# ----------------------------------------------------------------------

def _character_windows(n: int, size: int, overlap: int) -> list[tuple[int, int]]:
    windows = []
    start = 0
    step = size - overlap
    while start < n:
        end = min(start + size, n)
        windows.append((start, end))
        if end == n:
            break
        start += step
    return windows


def _line_units(text: str) -> list[tuple[int, int]]:
    units = []
    start = 0
    for line in text.split("\n"):
        units.append((start, start + len(line)))
        start += len(line) + 1
    return units


def _recursive_units(text: str, offset: int, size: int, seps: Sequence[str]) -> list[tuple[int, int]]:
    """Split into units no larger than ``size`` using the separator ladder;
    separators stay attached to the preceding unit so units tile the text."""
    if len(text) <= size:
        return [(offset, offset + len(text))] if text else []
    if not seps:
        return [
            (offset + s, offset + min(s + size, len(text)))
            for s in range(0, len(text), size)
        ]
    sep, rest = seps[0], seps[1:]
    if sep not in text:
        return _recursive_units(text, offset, size, rest)
    units = []
    pos = 0
    while pos < len(text):
        cut = text.find(sep, pos)
        end = len(text) if cut < 0 else cut + len(sep)
        units.extend(_recursive_units(text[pos:end], offset + pos, size, rest))
        pos = end
    return units


def _pack_units(
    units: list[tuple[int, int]], size: int, overlap: int
) -> list[tuple[int, int]]:
    """Greedily pack consecutive units into windows of at most ``size`` chars
    (a window always takes at least one unit), carrying back whole trailing
    units totalling at most ``overlap`` chars into the next window."""
    windows = []
    i = 0
    n = len(units)
    while i < n:
        j = i + 1
        while j < n and units[j][1] - units[i][0] <= size:
            j += 1
        windows.append((units[i][0], units[j - 1][1]))
        if j >= n:
            break
        back = j
        while back - 1 > i and units[j - 1][1] - units[back - 1][0] <= overlap:
            back -= 1
        i = max(back, i + 1)
    return windows


def _cover(
    window: tuple[int, int],
    spans: list[tuple[SectionId, int, int]],
    threshold: int,
) -> tuple[tuple[SectionId, ...], tuple[SectionId, ...]]:
    a, b = window
    full = []
    partial = []
    for sid, s, e in spans:
        if s >= a and e <= b:
            full.append(sid)
            continue
        overlap = min(b, e) - max(a, s)
        if overlap >= threshold:
            partial.append(sid)
    return tuple(full), tuple(partial)


def chunk_corpus(corpus: Corpus, spec: ChunkingSpec) -> list[Chunk]:
    """Chunk every law code in the corpus under ``spec``.

    Hierarchy-aware chunking emits exactly one chunk per section containing
    its full text; naive strategies emit contiguous windows of the per-code
    text with full/partial coverage metadata attached.
    """
    if not corpus.sections:
        raise StructuralError("corpus has no sections")
    chunks: list[Chunk] = []
    for law in corpus.codes:
        text, spans = code_text_and_spans(corpus, law)
        if not spans:
            continue
        if spec.strategy == "hierarchy_aware":
            for sid, s, e in spans:
                chunks.append(Chunk(
                    chunk_id=_chunk_id("hierarchy_aware", law, s, e),
                    text=corpus.sections[sid].text,
                    covered_full=(sid,),
                    covered_partial=(),
                    law=law,
                    span=(s, e),
                ))
            continue
        if spec.strategy == "character":
            windows = _character_windows(len(text), spec.chunk_size, spec.chunk_overlap)
        elif spec.strategy == "line":
            windows = _pack_units(_line_units(text), spec.chunk_size, spec.chunk_overlap)
        else:  # recursive
            units = _recursive_units(text, 0, spec.chunk_size, ["\n\n", "\n", " "])
            windows = _pack_units(units, spec.chunk_size, spec.chunk_overlap)
        for a, b in windows:
            full, partial = _cover((a, b), spans, spec.partial_threshold)
            chunks.append(Chunk(
                chunk_id=_chunk_id(spec.strategy, law, a, b),
                text=text[a:b],
                covered_full=full,
                covered_partial=partial,
                law=law,
                span=(a, b),
            ))
    return chunks


# ----------------------------------------------------------------------
# Information-loss audit
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ChunkAudit:
    """The five information-loss measurements for one chunk set."""

    sections_per_chunk: float
    chunks_per_section: float
    fail_chunk_ratio: float
    fail_section_ratio: float
    uncovered_section_ratio: float

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (
            self.sections_per_chunk,
            self.chunks_per_section,
            self.fail_chunk_ratio,
            self.fail_section_ratio,
            self.uncovered_section_ratio,
        )

    def as_dict(self) -> dict[str, float]:
        return {
            "sections_per_chunk": self.sections_per_chunk,
            "chunks_per_section": self.chunks_per_section,
            "fail_chunk_ratio": self.fail_chunk_ratio,
            "fail_section_ratio": self.fail_section_ratio,
            "uncovered_section_ratio": self.uncovered_section_ratio,
        }


def audit_chunks(chunks: Sequence[Chunk], corpus: Corpus) -> ChunkAudit:
    """Audit a chunk set against the corpus.

    * sections_per_chunk — mean per chunk of |covered_full ∪ covered_partial|
    * chunks_per_section — mean covering-chunk count over sections covered by
      at least one chunk (uncovered sections are reported separately)
    * fail_chunk_ratio — chunks fully covering no section
    * fail_section_ratio — sections fully covered by no single chunk
    * uncovered_section_ratio — sections absent from all chunk metadata
    """
    if not chunks:
        raise StructuralError("no chunks to audit")
    all_sections = set(corpus.sections)
    fully_covered: set[SectionId] = set()
    touch_counts: dict[SectionId, int] = {}
    section_total = 0
    fail_chunks = 0
    for chunk in chunks:
        covered = set(chunk.covered_full) | set(chunk.covered_partial)
        unknown = covered - all_sections
        if unknown:
            raise StructuralError(
                f"chunk {chunk.chunk_id} references unknown sections: "
                f"{sorted(s.key() for s in unknown)}"
            )
        section_total += len(covered)
        if not chunk.covered_full:
            fail_chunks += 1
        fully_covered.update(chunk.covered_full)
        for sid in covered:
            touch_counts[sid] = touch_counts.get(sid, 0) + 1

    n_chunks = len(chunks)
    n_sections = len(all_sections)
    covered_sections = len(touch_counts)
    return ChunkAudit(
        sections_per_chunk=section_total / n_chunks,
        chunks_per_section=(
            sum(touch_counts.values()) / covered_sections if covered_sections else 0.0
        ),
        fail_chunk_ratio=fail_chunks / n_chunks,
        fail_section_ratio=(n_sections - len(fully_covered)) / n_sections,
        uncovered_section_ratio=(n_sections - covered_sections) / n_sections,
    )


def filter_full_cover(chunks: Sequence[Chunk]) -> list[Chunk]:
    """Drop chunks that fully cover no section; order preserved. Idempotent."""
    return [c for c in chunks if c.covered_full]


def map_chunks_to_sections(
    ranked: RankedList, chunks: Iterable[Chunk]
) -> RankedList:
    """Expand a ranked list of chunk ids into a ranked list of section keys.

    Each chunk contributes only its fully covered sections, in rank order;
    a section already emitted keeps its first (best) rank; scores are
    inherited from the contributing chunk.
    """
    by_id = {c.chunk_id: c for c in chunks} if not isinstance(chunks, dict) else chunks
    items: list[tuple[str, float]] = []
    seen: set[str] = set()
    for chunk_id, score in ranked.items:
        chunk = by_id.get(chunk_id)
        if chunk is None:
            raise StructuralError(f"unknown chunk id {chunk_id!r} in ranked list")
        for sid in chunk.covered_full:
            key = sid.key()
            if key not in seen:
                seen.add(key)
                items.append((key, score))
    return RankedList(query_id=ranked.query_id, items=tuple(items), k=ranked.k)


# ----------------------------------------------------------------------
# JSONL dumps
# ----------------------------------------------------------------------

def dump_chunks_jsonl(chunks: Iterable[Chunk], fp: TextIO) -> None:
    for c in chunks:
        fp.write(json.dumps({
            "chunk_id": c.chunk_id,
            "text": c.text,
            "covered_full": [s.key() for s in c.covered_full],
            "covered_partial": [s.key() for s in c.covered_partial],
        }, ensure_ascii=False, sort_keys=True))
        fp.write("\n")


def load_chunks_jsonl(fp: Iterable[str]) -> list[Chunk]:
    chunks = []
    for line in fp:
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        chunks.append(Chunk(
            chunk_id=obj["chunk_id"],
            text=obj["text"],
            covered_full=tuple(SectionId.from_key(k) for k in obj["covered_full"]),
            covered_partial=tuple(SectionId.from_key(k) for k in obj["covered_partial"]),
        ))
    return chunks
