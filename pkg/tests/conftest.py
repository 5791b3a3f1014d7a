from __future__ import annotations

import json
import random

import pytest

from lexrag.corpus import Corpus, parse_corpus


def pytest_runtest_logreport(report):
    """One PASS/FAIL line per acceptance criterion."""
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        name = report.nodeid.split("::")[-1].replace("test_", "", 1)
        print(f"\nACCEPTANCE {name}: {'PASS' if report.passed else 'FAIL'}")

# Two codes exercising cross-law references, slash numbers, ordinal suffixes
# and an enumerated range with a trailing list.
MARKER_TEXT = """\
@code rc | Revenue Code | code
@chapter 1 General Provisions
@section 2
In this Code, unless the context otherwise requires, tax means revenue tax.
@section 3 octo
Tax scales may be adjusted by ministerial regulation for the purposes of Section 2.
@section 18
Upon assessment, payment is due within thirty days of notification.
@section 18 bis
In cases necessary to protect collection, the assessing officer may demand tax
before the filing due date; payment falls due within seven days.
The amount assessed is credited against the liability computed under Section 18.
@chapter 4 Value Added Tax
@section 77/2
Sales of goods and provision of services in the kingdom are subject to value
added tax under this Chapter.
@code sea-2535 | Securities and Exchange Act B.E. 2535 | act
@chapter 6 Supervision
@section 186
To prevent damage to the public interest, the Commission has the power to:
(1) suspend trading of listed securities;
(2) order any person to act or refrain from acting.
@section 291
Anyone who violates or fails to comply with orders issued under Section 186(2)
shall be liable to imprisonment for not more than one year, a fine, or both.
@code ccc | Civil and Commercial Code | code
@book 3 Specific Contracts
@chapter 4 Hire of Property
@section 552
The lessee must use the property as agreed or as customary.
@section 553
The lessee is bound to keep the property in good repair.
@section 554
If the lessee acts contrary to the lease, the lessor may give notice.
@section 555
The lessee must allow inspection at reasonable times.
@section 558
The lessee may not sublet without consent of the lessor.
@section 562
The lessee is liable for loss caused by their own fault.
@section 563
Actions by the lessor against the lessee must be brought within six months.
@chapter 5 Superficies
@section 1409
The provisions of this Code regarding the duties and liabilities of a lessee,
as stipulated in Sections 552 to 555, Sections 558, 562, and 563, shall apply
mutatis mutandis.
"""


@pytest.fixture(scope="session")
def corpus() -> Corpus:
    return parse_corpus(MARKER_TEXT)


def make_synthetic_corpus(
    n_sections: int = 40,
    seed: int = 11,
    line_len: int = 60,
    lengths: tuple[int, ...] = (90, 150, 240, 420, 700, 1100),
) -> Corpus:
    """One code with sections of seeded pseudo-random lengths for chunking
    experiments; the defaults include sections far above any tested chunk
    size."""
    rng = random.Random(seed)
    lines = ["@code syn | Synthetic Long Act | act"]
    words = ["duty", "liability", "notice", "consent", "transfer", "holder",
             "register", "penalty", "assessment", "claim"]
    for i in range(1, n_sections + 1):
        lines.append(f"@section {i}")
        target = rng.choice(lengths)
        body_words = []
        while sum(len(w) + 1 for w in body_words) < target:
            body_words.append(rng.choice(words))
        text, cur_len = [], 0
        current: list[str] = []
        for w in body_words:
            current.append(w)
            cur_len += len(w) + 1
            if cur_len > line_len:
                text.append(" ".join(current))
                current, cur_len = [], 0
        if current:
            text.append(" ".join(current))
        lines.extend(text)
    return parse_corpus("\n".join(lines))


@pytest.fixture(scope="session")
def synthetic_corpus() -> Corpus:
    return make_synthetic_corpus()


@pytest.fixture(scope="session")
def sweep_corpus() -> Corpus:
    """Regular section/line lengths so chunk-size trends are smooth."""
    return make_synthetic_corpus(
        n_sections=80, seed=3, line_len=35, lengths=(100, 200, 300, 400)
    )


DATASET_ROWS = [
    {
        "query_id": "q1",
        "question": "How many days to pay after an early assessment notice?",
        "positives": [{"law": "rc", "number": "18", "suffix": "bis"}],
        "answer": "Seven days from receiving the assessment notice.",
    },
    {
        "query_id": "q2",
        "question": "What penalty applies for defying a suspension order?",
        "positives": [
            {"law": "sea-2535", "number": "291"},
            {"law": "sea-2535", "number": "186"},
        ],
        "answer": "Imprisonment up to one year, a fine, or both.",
    },
    {
        "query_id": "q3",
        "question": "Which duties of a lessee apply to superficies?",
        "positives": [{"law": "ccc", "number": "1409"}],
        "answer": "The lessee duty provisions apply mutatis mutandis.",
    },
    {
        "query_id": "q4",
        "question": "Is a service provided in the kingdom subject to VAT?",
        "positives": [{"law": "rc", "number": "77/2"}],
        "answer": "Yes, sales and services are subject to value added tax.",
    },
    {
        "query_id": "q5",
        "question": "May a lessee sublet the property without consent?",
        "positives": [{"law": "ccc", "number": "558"}],
        "answer": "No, subletting requires the lessor's consent.",
    },
]

FEWSHOT_ROWS = [
    {
        "query_id": "f1",
        "question": "Who must keep the leased property in repair?",
        "positives": [{"law": "ccc", "number": "553"}],
        "answer": "The lessee is bound to keep the property in good repair.",
    },
    {
        "query_id": "f2",
        "question": "When is tax generally due after notification?",
        "positives": [{"law": "rc", "number": "18"}],
        "answer": "Within thirty days of notification.",
    },
    {
        "query_id": "f3",
        "question": "What does the tax code mean by tax?",
        "positives": [{"law": "rc", "number": "2"}],
        "answer": "Revenue tax, unless the context requires otherwise.",
    },
]


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fp:
        for row in rows:
            fp.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path


@pytest.fixture()
def dataset_path(tmp_path):
    return write_jsonl(tmp_path / "dataset.jsonl", DATASET_ROWS)


@pytest.fixture()
def fewshot_path(tmp_path):
    return write_jsonl(tmp_path / "fewshot.jsonl", FEWSHOT_ROWS)


@pytest.fixture()
def corpus_path(tmp_path, corpus):
    path = tmp_path / "corpus.jsonl"
    corpus.save(path)
    return path
