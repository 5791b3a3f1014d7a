"""End-to-end scoring: citation precision/recall/F1, judge-mediated coverage
and contradiction, judge-agreement validation, and derived analytics."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import SectionId
from .errors import JudgeError, StructuralError, UsageError
from .metrics import EvalEntry
from .retrieval import RankedList

logger = logging.getLogger(__name__)

MODES = ("parametric", "naive_rag", "structured_rag", "golden_context", "long_context")

COVERAGE_VALUES = (0, 50, 100)
CONTRADICTION_VALUES = (0, 1)


@dataclass(frozen=True)
class JudgeVerdict:
    coverage: int
    contradiction: int
    rationale: str | None = None

    def __post_init__(self):
        if self.coverage not in COVERAGE_VALUES:
            raise StructuralError(f"coverage must be one of {COVERAGE_VALUES}")
        if self.contradiction not in CONTRADICTION_VALUES:
            raise StructuralError("contradiction must be 0 or 1")

    def to_obj(self) -> dict:
        obj = {"coverage": self.coverage, "contradiction": self.contradiction}
        if self.rationale is not None:
            obj["rationale"] = self.rationale
        return obj


@dataclass
class GenerationRecord:
    """One generated answer with its parsed citations and judge verdict."""

    query_id: str
    answer_text: str
    citations: tuple[SectionId, ...]
    raw_model_output: str
    mode: str
    flags: tuple[str, ...] = ()
    verdict: JudgeVerdict | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise StructuralError(f"unknown mode {self.mode!r}")
        # citations are normalized and deduplicated upstream; keep first wins
        seen: set[SectionId] = set()
        unique = []
        for sid in self.citations:
            if sid not in seen:
                seen.add(sid)
                unique.append(sid)
        object.__setattr__(self, "citations", tuple(unique))

    @property
    def citation_keys(self) -> frozenset[str]:
        return frozenset(s.key() for s in self.citations)

    def to_obj(self) -> dict:
        return {
            "query_id": self.query_id,
            "mode": self.mode,
            "answer_text": self.answer_text,
            "citations": [s.key() for s in self.citations],
            "raw_model_output": self.raw_model_output,
            "flags": list(self.flags),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "GenerationRecord":
        return cls(
            query_id=obj["query_id"],
            answer_text=obj["answer_text"],
            citations=tuple(SectionId.from_key(k) for k in obj["citations"]),
            raw_model_output=obj.get("raw_model_output", ""),
            mode=obj["mode"],
            flags=tuple(obj.get("flags", ())),
        )


def citation_scores(
    citations: Sequence[SectionId] | frozenset[str],
    positives: Sequence[SectionId] | frozenset[str],
) -> tuple[float, float, float]:
    """(precision, recall, f1) of cited sections against the gold set.

    An empty citation list scores zero precision against a non-empty gold set
    (vacuous answers must not score); both-empty scores 1.0 defensively.
    """
    C = _keyset(citations)
    T = _keyset(positives)
    inter = len(C & T)
    if C:
        precision = inter / len(C)
    else:
        precision = 1.0 if not T else 0.0
    if T:
        recall = inter / len(T)
    else:
        recall = 1.0 if not C else 0.0
    f1 = _f1(precision, recall)
    return precision, recall, f1


def _keyset(items) -> frozenset[str]:
    return frozenset(s.key() if isinstance(s, SectionId) else str(s) for s in items)


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if (p + r) > 0 else 0.0


# ----------------------------------------------------------------------
# LLM judge
# ----------------------------------------------------------------------

DEFAULT_JUDGE_PROMPT = (
    "Compare the generated answer with the gold answer for the question.\n"
    "Question: {question}\nGold answer: {gold_answer}\n"
    "Generated answer: {answer}\n\n"
    "Reply with a JSON object: {{\"coverage\": 0|50|100, \"contradiction\": 0|1,"
    " \"rationale\": \"...\"}}.\n"
    "coverage is 100 when the generated answer covers every point of the gold"
    " answer, 50 for partial coverage, 0 for complete divergence; contradiction"
    " is 1 only when the answers directly disagree."
)

_JSON_RE = re.compile(r"\{.*\}", re.DOTALL)


def parse_verdict(text: str) -> JudgeVerdict:
    m = _JSON_RE.search(text)
    if not m:
        raise JudgeError(f"no JSON object in judge output: {text[:80]!r}")
    try:
        obj = json.loads(m.group(0))
    except json.JSONDecodeError as exc:
        raise JudgeError(f"invalid JSON in judge output: {exc}") from exc
    try:
        return JudgeVerdict(
            coverage=int(obj["coverage"]),
            contradiction=int(obj["contradiction"]),
            rationale=obj.get("rationale"),
        )
    except (KeyError, TypeError, ValueError, StructuralError) as exc:
        raise JudgeError(f"out-of-enum judge verdict: {exc}") from exc


def judge(
    entry: EvalEntry,
    record: GenerationRecord,
    client,
    prompt: str = DEFAULT_JUDGE_PROMPT,
    *,
    retries: int = 2,
) -> JudgeVerdict:
    """Ask the judge endpoint for a coverage/contradiction verdict.

    Out-of-enum or unparseable output is retried up to ``retries`` extra
    times, then raised as :class:`JudgeError`; callers record the error and
    exclude the entry from verdict means.
    """
    rendered = prompt.format(
        question=entry.query, gold_answer=entry.gold_answer, answer=record.answer_text
    )
    last: JudgeError | None = None
    for _ in range(retries + 1):
        text = client.assess(
            rendered,
            question=entry.query,
            gold_answer=entry.gold_answer,
            answer=record.answer_text,
        )
        try:
            return parse_verdict(text)
        except JudgeError as exc:
            last = exc
            logger.warning("judge verdict rejected for %s: %s", entry.query_id, exc)
    raise last  # type: ignore[misc]


# ----------------------------------------------------------------------
# Judge agreement
# ----------------------------------------------------------------------

def confusion_matrix(
    y_true: Sequence[int], y_pred: Sequence[int], labels: Sequence[int]
) -> list[list[int]]:
    index = {lab: i for i, lab in enumerate(labels)}
    matrix = [[0] * len(labels) for _ in labels]
    for t, p in zip(y_true, y_pred):
        matrix[index[t]][index[p]] += 1
    return matrix


def weighted_prf(
    y_true: Sequence[int], y_pred: Sequence[int], labels: Sequence[int]
) -> dict:
    """Support-weighted precision/recall/F1 plus the per-class breakdown."""
    matrix = confusion_matrix(y_true, y_pred, labels)
    n = len(y_true)
    per_class = {}
    w_p = w_r = w_f = 0.0
    for i, lab in enumerate(labels):
        support = sum(matrix[i])
        predicted = sum(row[i] for row in matrix)
        tp = matrix[i][i]
        p = tp / predicted if predicted else 0.0
        r = tp / support if support else 0.0
        f = _f1(p, r)
        per_class[lab] = {"precision": p, "recall": r, "f1": f, "support": support}
        w_p += support * p
        w_r += support * r
        w_f += support * f
    return {
        "precision": w_p / n,
        "recall": w_r / n,
        "f1": w_f / n,
        "per_class": per_class,
        "confusion_matrix": matrix,
        "labels": list(labels),
    }


def judge_agreement(
    human: Sequence[JudgeVerdict], model: Sequence[JudgeVerdict]
) -> dict:
    """Weighted P/R/F1 and confusion matrices of model verdicts against human
    verdicts, separately for coverage and contradiction."""
    if len(human) != len(model):
        raise UsageError(f"{len(human)} human verdicts but {len(model)} model verdicts")
    if not human:
        raise UsageError("no verdicts to compare")
    return {
        "coverage": weighted_prf(
            [v.coverage for v in human], [v.coverage for v in model], COVERAGE_VALUES
        ),
        "contradiction": weighted_prf(
            [v.contradiction for v in human],
            [v.contradiction for v in model],
            CONTRADICTION_VALUES,
        ),
    }


# ----------------------------------------------------------------------
# End-to-end report
# ----------------------------------------------------------------------

@dataclass
class E2EReport:
    mean_coverage: float | None
    mean_contradiction: float | None
    precision_micro: float
    recall_micro: float
    f1_micro: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    recall_difference: float | None
    hallucination_ratio: float | None
    judge_errors: int
    per_entry: list[dict]

    def to_obj(self, include_per_entry: bool = True) -> dict:
        obj = {
            "coverage": self.mean_coverage,
            "contradiction": self.mean_contradiction,
            "e2e_precision": {"micro": self.precision_micro, "macro": self.precision_macro},
            "e2e_recall": {"micro": self.recall_micro, "macro": self.recall_macro},
            "e2e_f1": {"micro": self.f1_micro, "macro": self.f1_macro},
            "recall_difference": self.recall_difference,
            "hallucination_ratio": self.hallucination_ratio,
            "judge_errors": self.judge_errors,
        }
        if include_per_entry:
            obj["per_entry"] = self.per_entry
        return obj


def build_e2e_report(
    entries: Sequence[EvalEntry],
    records: Mapping[str, GenerationRecord],
    verdicts: Mapping[str, JudgeVerdict | None] | None = None,
    retriever_recall_macro: float | None = None,
) -> E2EReport:
    """Assemble the E2E report from per-entry citation scores and verdicts.

    F1 at each averaging level is the harmonic mean of the paired precision
    and recall at that level. Entries whose judge failed are excluded from the
    coverage/contradiction means and counted instead of imputed.
    """
    verdicts = verdicts or {}
    per_entry = []
    inter_total = cited_total = gold_total = 0
    p_sum = r_sum = 0.0
    cov_vals: list[int] = []
    con_vals: list[int] = []
    judge_errors = 0
    halluc = 0
    judged = 0
    for entry in entries:
        record = records.get(entry.query_id)
        C = record.citation_keys if record else frozenset()
        T = entry.positive_keys
        p, r, f = citation_scores(C, T)
        inter_total += len(C & T)
        cited_total += len(C)
        gold_total += len(T)
        p_sum += p
        r_sum += r
        verdict = verdicts.get(entry.query_id)
        row = {
            "query_id": entry.query_id,
            "precision": p,
            "recall": r,
            "f1": f,
            "citations": sorted(C),
            "coverage": verdict.coverage if verdict else None,
            "contradiction": verdict.contradiction if verdict else None,
            "errors": list(record.flags) if record else ["missing_generation"],
        }
        if entry.query_id in verdicts and verdict is None:
            judge_errors += 1
            row["errors"] = row["errors"] + ["judge_error"]
        if verdict is not None:
            judged += 1
            cov_vals.append(verdict.coverage)
            con_vals.append(verdict.contradiction)
            if r == 0.0 and verdict.coverage > 0:
                halluc += 1
        per_entry.append(row)

    n = len(entries)
    p_micro = inter_total / cited_total if cited_total else (1.0 if gold_total == 0 else 0.0)
    r_micro = inter_total / gold_total if gold_total else 0.0
    p_macro = p_sum / n if n else 0.0
    r_macro = r_sum / n if n else 0.0
    mean_cov = sum(cov_vals) / len(cov_vals) if cov_vals else None
    mean_con = sum(con_vals) / len(con_vals) if con_vals else None
    return E2EReport(
        mean_coverage=mean_cov,
        mean_contradiction=mean_con,
        precision_micro=p_micro,
        recall_micro=r_micro,
        f1_micro=_f1(p_micro, r_micro),
        precision_macro=p_macro,
        recall_macro=r_macro,
        f1_macro=_f1(p_macro, r_macro),
        recall_difference=(
            retriever_recall_macro - r_macro
            if retriever_recall_macro is not None else None
        ),
        hallucination_ratio=halluc / judged if judged else None,
        judge_errors=judge_errors,
        per_entry=per_entry,
    )


def derived_analytics(
    entries: Sequence[EvalEntry],
    runs: Mapping[str, RankedList],
    records: Mapping[str, GenerationRecord],
    verdicts: Mapping[str, JudgeVerdict | None],
    k: int,
) -> dict:
    """Recall difference and hallucination ratio for one run.

    recall_difference — macro retriever recall at ``k`` minus macro citation
    recall; hallucination_ratio — fraction of judged entries that cite no
    correct section yet receive coverage > 0.
    """
    retr_sum = 0.0
    e2e_sum = 0.0
    halluc = 0
    judged = 0
    rows = []
    for entry in entries:
        run = runs.get(entry.query_id)
        R = run.ids[:k] if run else []
        T = entry.positive_keys
        retr = len(T & set(R)) / len(T)
        record = records.get(entry.query_id)
        _, e2e, _ = citation_scores(record.citation_keys if record else frozenset(), T)
        retr_sum += retr
        e2e_sum += e2e
        verdict = verdicts.get(entry.query_id)
        hallucinated = None
        if verdict is not None:
            judged += 1
            hallucinated = e2e == 0.0 and verdict.coverage > 0
            halluc += int(hallucinated)
        rows.append({
            "query_id": entry.query_id,
            "retriever_recall": retr,
            "e2e_recall": e2e,
            "hallucinated": hallucinated,
        })
    n = len(entries)
    return {
        "recall_difference": retr_sum / n - e2e_sum / n if n else None,
        "hallucination_ratio": halluc / judged if judged else None,
        "per_entry": rows,
    }


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Pearson correlation; None when either series has zero variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return None
    return float(dx @ dy / denom)


def metric_correlation(
    retrieval_series: Mapping[str, Mapping[str, float]],
    e2e_series: Mapping[str, Mapping[str, float]],
) -> dict:
    """Pearson correlation of every retrieval metric against coverage,
    contradiction and e2e F1 across runs (undefined cells are null)."""
    run_ids = sorted(set(retrieval_series) & set(e2e_series))
    if len(run_ids) < 3:
        raise UsageError("metric correlation needs at least 3 paired runs")
    retrieval_metrics = sorted({m for r in retrieval_series.values() for m in r})
    e2e_metrics = sorted({m for r in e2e_series.values() for m in r})
    table: dict[str, dict[str, float | None]] = {}
    for rm in retrieval_metrics:
        xs = [retrieval_series[r][rm] for r in run_ids]
        table[rm] = {
            em: pearson(xs, [e2e_series[r][em] for r in run_ids])
            for em in e2e_metrics
        }
    return {"runs": run_ids, "correlations": table}
