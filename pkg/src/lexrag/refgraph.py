"""Section cross-reference graph and ranked-list augmentation.

Augmentation walks the reference graph depth-first from each retrieved
section, splicing unvisited referenced sections into the ranked list right
after the section that cites them, up to a maximum depth. The retrieved
sections keep their relative order; a global first-occurrence rule keeps the
list duplicate-free and terminates cycles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

from .corpus import Corpus, SectionId
from .errors import ConfigError, StructuralError, UsageError
from .metrics import EvalEntry, evaluate_entry
from .retrieval import RankedList

# Keeps augmented scores strictly decreasing; metrics depend only on order.
_SCORE_EPS = 1e-9


@dataclass(frozen=True)
class AugmentSpec:
    max_depth: int = 1
    follow_parents: bool = False  # experimental; off by default

    def __post_init__(self):
        if self.max_depth < 0:
            raise ConfigError("max_depth must be >= 0")


@dataclass
class ReferenceGraph:
    """Adjacency over resolved references, child order = first occurrence in
    the section text. Every corpus section is a node."""

    adjacency: dict[SectionId, tuple[SectionId, ...]]
    parents: dict[SectionId, tuple[SectionId, ...]]

    def __contains__(self, sid: SectionId) -> bool:
        return sid in self.adjacency

    def children(self, sid: SectionId) -> tuple[SectionId, ...]:
        return self.adjacency.get(sid, ())

    def dump_edges_jsonl(self, fp: TextIO) -> None:
        for src, targets in self.adjacency.items():
            for dst in targets:
                fp.write(json.dumps({"from": src.key(), "to": dst.key()}, ensure_ascii=False))
                fp.write("\n")


def build_graph(corpus: Corpus) -> ReferenceGraph:
    """Mirror each record's references, restricted to resolved targets."""
    adjacency: dict[SectionId, tuple[SectionId, ...]] = {}
    parents: dict[SectionId, list[SectionId]] = {sid: [] for sid in corpus.sections}
    for rec in corpus.sections.values():
        children = tuple(r for r in rec.references if r in corpus.sections)
        adjacency[rec.id] = children
        for child in children:
            parents[child].append(rec.id)
    return ReferenceGraph(
        adjacency=adjacency,
        parents={sid: tuple(ps) for sid, ps in parents.items()},
    )


def load_graph_jsonl(fp: Iterable[str]) -> ReferenceGraph:
    adjacency: dict[SectionId, list[SectionId]] = {}
    parents: dict[SectionId, list[SectionId]] = {}
    for line in fp:
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        src = SectionId.from_key(obj["from"])
        dst = SectionId.from_key(obj["to"])
        adjacency.setdefault(src, []).append(dst)
        adjacency.setdefault(dst, [])
        parents.setdefault(dst, []).append(src)
        parents.setdefault(src, [])
    return ReferenceGraph(
        adjacency={k: tuple(v) for k, v in adjacency.items()},
        parents={k: tuple(v) for k, v in parents.items()},
    )


def augment(ranked: RankedList, graph: ReferenceGraph, spec: AugmentSpec) -> RankedList:
    """Splice referenced sections into a ranked list, depth-first.

    The produced id set is exactly the input plus every section within
    ``max_depth`` reference hops of it, so growing the depth never loses a
    section. A node reached again with more remaining budget is re-expanded
    (without re-inserting) — a plain visited cut would drop descendants on
    graphs where a deep early path shadows a shallow later one.
    """
    originals = [SectionId.from_key(d) for d in ranked.ids]
    for sid in originals:
        if sid not in graph:
            raise StructuralError(f"unknown section {sid.key()} in ranked list")

    order: list[SectionId] = []
    inserted: set[SectionId] = set(originals)
    best_remaining: dict[SectionId, int] = {}

    def expand(node: SectionId, remaining: int) -> None:
        if remaining <= 0:
            return
        neighbours = graph.children(node)
        if spec.follow_parents:
            neighbours = neighbours + tuple(
                p for p in graph.parents.get(node, ()) if p not in neighbours
            )
        for child in neighbours:
            if child not in inserted:
                inserted.add(child)
                order.append(child)
            if remaining - 1 > best_remaining.get(child, -1):
                best_remaining[child] = remaining - 1
                expand(child, remaining - 1)

    out: list[SectionId] = []
    for sid in originals:
        order = []
        best_remaining[sid] = max(best_remaining.get(sid, -1), spec.max_depth)
        expand(sid, spec.max_depth)
        out.append(sid)
        out.extend(order)

    return RankedList(
        query_id=ranked.query_id,
        items=tuple(_respace_scores(out, ranked)),
        k=ranked.k,
    )


def _respace_scores(
    out: Sequence[SectionId], ranked: RankedList
) -> list[tuple[str, float]]:
    """Inserted sections inherit the preceding score minus an epsilon per
    position, nudged so the whole list stays strictly decreasing."""
    original_scores = dict(ranked.items)
    items: list[tuple[str, float]] = []
    prev = None
    for sid in out:
        key = sid.key()
        score = original_scores.get(key)
        if prev is not None:
            ceiling = prev - _SCORE_EPS
            score = ceiling if score is None else min(score, ceiling)
        elif score is None:  # augmented list starting with an insertion cannot happen
            score = 0.0
        items.append((key, score))
        prev = score
    return items


def depth_sweep(
    ranked_runs: Sequence[RankedList],
    graph: ReferenceGraph,
    depths: Sequence[int],
    gold: Sequence[set[SectionId]],
    *,
    k: int | None = None,
) -> dict[int, dict]:
    """Augment every run at each depth and report mean metric deltas versus
    depth 0 plus the mean augmented-list length.

    ``gold`` holds the positive section set per run, aligned with
    ``ranked_runs``. Metrics are computed over the full augmented list unless
    ``k`` is given.
    """
    if len(ranked_runs) != len(gold):
        raise UsageError(
            f"{len(ranked_runs)} runs but {len(gold)} gold sets"
        )
    entries = [
        EvalEntry(
            query_id=run.query_id or str(i),
            query="",
            positives=tuple(sorted(g)),
            gold_answer="",
        )
        for i, (run, g) in enumerate(zip(ranked_runs, gold))
    ]

    def mean_metrics(runs: Sequence[RankedList]) -> tuple[dict[str, float], float]:
        per = [
            evaluate_entry(e, r, k if k is not None else len(r.items))
            for e, r in zip(entries, runs)
        ]
        n = len(per)
        agg = {
            m: sum(p[m] for p in per) / n
            for m in ("hit_rate", "multi_hit_rate", "recall", "mrr", "multi_mrr")
        }
        return agg, sum(len(r.items) for r in runs) / n

    results: dict[int, dict] = {}
    base: dict[str, float] | None = None
    for depth in depths:
        spec = AugmentSpec(max_depth=depth)
        augmented = [augment(run, graph, spec) for run in ranked_runs]
        agg, mean_len = mean_metrics(augmented)
        if depth == 0:
            base = agg
        if base is None:
            base, _ = mean_metrics([augment(r, graph, AugmentSpec(0)) for r in ranked_runs])
        results[depth] = {
            "metrics": agg,
            "deltas": {m: agg[m] - base[m] for m in agg},
            "mean_sections_per_query": mean_len,
        }
    return results
