"""Single- and multi-label retrieval metrics with per-sample and batch forms.

All functions compare canonical section keys (see ``corpus.SectionId.key``),
never raw strings, and return values in [0, 1]. ``R`` is the ranked id list
for one query; ``T`` the positive set; ``k`` the evaluation cutoff.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, TextIO

from .corpus import SectionId
from .errors import StructuralError, UsageError

METRIC_NAMES = ("hit_rate", "multi_hit_rate", "recall", "mrr", "multi_mrr")

DEFAULT_KS = (1, 5, 10)


@dataclass(frozen=True)
class EvalEntry:
    """One benchmark entry: query, positive section set, gold answer."""

    query_id: str
    query: str
    positives: tuple[SectionId, ...]
    gold_answer: str
    unresolved: tuple[SectionId, ...] = ()

    def __post_init__(self):
        if not self.positives:
            raise StructuralError(f"entry {self.query_id!r} has no positives")
        if len(set(self.positives)) != len(self.positives):
            raise StructuralError(f"entry {self.query_id!r} has duplicate positives")

    @property
    def positive_keys(self) -> frozenset[str]:
        return frozenset(s.key() for s in self.positives)


def matched_ranks(T: Iterable[str], R: Sequence[str], k: int) -> list[int]:
    """Ascending 1-based positions of T within the top-k of R."""
    tset = set(T)
    return [i for i, d in enumerate(R[:k], start=1) if d in tset]


def hit_rate(T: Iterable[str], R: Sequence[str], k: int) -> float:
    """1 iff any positive appears in the top k."""
    return 1.0 if matched_ranks(T, R, k) else 0.0


def multi_hit_rate(T: Iterable[str], R: Sequence[str], k: int) -> float:
    """1 iff every positive appears in the top k."""
    tset = set(T)
    return 1.0 if tset and tset <= set(R[:k]) else 0.0


def recall_sample(T: Iterable[str], R: Sequence[str], k: int) -> float:
    """Per-sample recall |T ∩ R^k| / |T|."""
    tset = set(T)
    if not tset:
        raise UsageError("recall needs a non-empty positive set")
    return len(tset & set(R[:k])) / len(tset)


def mrr(T: Iterable[str], R: Sequence[str], k: int) -> float:
    """Reciprocal of the best matched rank; 0 without a match."""
    ranks = matched_ranks(T, R, k)
    return 1.0 / ranks[0] if ranks else 0.0


def multi_mrr(T: Iterable[str], R: Sequence[str], k: int) -> float:
    """Multi-label reciprocal rank.

    With matched ranks r_1 < ... < r_m the value is
    (1/|T|) Σ_j 1/(r_j − j + 1): the j-th matched positive is scored as if
    the j−1 positives above it were removed, so a perfect top-|T| packing
    scores exactly 1 and any miss or displacement scores less.
    """
    tset = set(T)
    ranks = matched_ranks(tset, R, k)
    if not ranks:
        return 0.0
    return sum(1.0 / (r - j + 1) for j, r in enumerate(ranks, start=1)) / len(tset)


def recall(
    entries: Sequence[EvalEntry],
    runs: Sequence[Sequence[str]],
    k: int,
) -> tuple[float, float]:
    """(micro, macro) recall over aligned entries/runs.

    micro — Σ|T∩R^k| / Σ|T| (the canonical reported form);
    macro — mean of per-sample recall (the form the multi-label MRR uses
    internally). Both are emitted, labeled, wherever recall is reported.
    """
    if len(entries) != len(runs):
        raise UsageError(f"{len(entries)} entries but {len(runs)} runs")
    hits = 0
    total = 0
    macro = 0.0
    for entry, R in zip(entries, runs):
        tset = entry.positive_keys
        inter = len(tset & set(R[:k]))
        hits += inter
        total += len(tset)
        macro += inter / len(tset)
    n = len(entries)
    return (hits / total if total else 0.0, macro / n if n else 0.0)


def evaluate_entry(entry: EvalEntry, run, k: int) -> dict[str, float]:
    """All five per-sample metrics for one entry at one cutoff."""
    R = run.ids if hasattr(run, "ids") else list(run)
    T = entry.positive_keys
    return {
        "hit_rate": hit_rate(T, R, k),
        "multi_hit_rate": multi_hit_rate(T, R, k),
        "recall": recall_sample(T, R, k),
        "mrr": mrr(T, R, k),
        "multi_mrr": multi_mrr(T, R, k),
    }


@dataclass
class RetrievalReport:
    """Aggregates and per-sample values for every metric at every cutoff."""

    ks: tuple[int, ...]
    aggregates: dict[int, dict[str, float]]
    per_sample: dict[int, dict[str, dict[str, float]]]  # k -> query_id -> metric
    missing_runs: tuple[str, ...] = ()

    def to_obj(self, include_per_sample: bool = True) -> dict:
        obj: dict = {"ks": list(self.ks), "metrics": {}}
        for k in self.ks:
            obj["metrics"][str(k)] = {
                m: {"aggregate": self.aggregates[k][m]}
                for m in self.aggregates[k]
            }
            if include_per_sample:
                for m in self.aggregates[k]:
                    # recall_micro/recall_macro share the per-sample series
                    base = "recall" if m.startswith("recall") else m
                    obj["metrics"][str(k)][m]["per_sample"] = {
                        qid: vals[base] for qid, vals in sorted(self.per_sample[k].items())
                    }
        if self.missing_runs:
            obj["missing_runs"] = list(self.missing_runs)
        return obj

    def dump_json(self, fp: TextIO, include_per_sample: bool = True) -> None:
        json.dump(self.to_obj(include_per_sample), fp, indent=2, sort_keys=True)
        fp.write("\n")


def evaluate_runs(
    entries: Sequence[EvalEntry],
    runs: Mapping[str, object] | Sequence[object],
    ks: Sequence[int] = DEFAULT_KS,
) -> RetrievalReport:
    """Score every entry at every cutoff.

    ``runs`` maps query_id to a ranked list (or is aligned with ``entries``).
    An entry without a run counts as an empty retrieval (all zeros) and is
    flagged in the report rather than skipped.
    """
    if not isinstance(runs, Mapping):
        if len(runs) != len(entries):
            raise UsageError(f"{len(entries)} entries but {len(runs)} runs")
        runs = {e.query_id: r for e, r in zip(entries, runs)}
    missing = []
    id_lists: list[list[str]] = []
    for entry in entries:
        run = runs.get(entry.query_id)
        if run is None:
            missing.append(entry.query_id)
            id_lists.append([])
        else:
            id_lists.append(run.ids if hasattr(run, "ids") else list(run))

    aggregates: dict[int, dict[str, float]] = {}
    per_sample: dict[int, dict[str, dict[str, float]]] = {}
    n = len(entries)
    for k in ks:
        table: dict[str, dict[str, float]] = {}
        sums = {m: 0.0 for m in METRIC_NAMES}
        for entry, R in zip(entries, id_lists):
            vals = {
                "hit_rate": hit_rate(entry.positive_keys, R, k),
                "multi_hit_rate": multi_hit_rate(entry.positive_keys, R, k),
                "recall": recall_sample(entry.positive_keys, R, k),
                "mrr": mrr(entry.positive_keys, R, k),
                "multi_mrr": multi_mrr(entry.positive_keys, R, k),
            }
            table[entry.query_id] = vals
            for m in METRIC_NAMES:
                sums[m] += vals[m]
        micro, macro = recall(entries, id_lists, k)
        aggregates[k] = {
            "hit_rate": sums["hit_rate"] / n,
            "multi_hit_rate": sums["multi_hit_rate"] / n,
            "recall_micro": micro,
            "recall_macro": macro,
            "mrr": sums["mrr"] / n,
            "multi_mrr": sums["multi_mrr"] / n,
        }
        per_sample[k] = table
    return RetrievalReport(
        ks=tuple(ks),
        aggregates=aggregates,
        per_sample=per_sample,
        missing_runs=tuple(missing),
    )
