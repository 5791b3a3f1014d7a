"""Hierarchical statute model: parsing, canonical section ids, cross-references.

The corpus is the single source of section text for every downstream module.
Input is marker-annotated legislation text (one ``@level label`` line per
hierarchy event, section body until the next marker); the interchange format
is UTF-8 JSON Lines, one record per line.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, TextIO

from .errors import ParseError, SectionIdError, StructuralError

logger = logging.getLogger(__name__)

TERMINOLOGIES = ("code", "act", "emergency-decree", "organic-law", "other")

# Hierarchy levels above the section, outermost first.
LEVELS = ("book", "title", "chapter", "division", "subsection")

# Canonical ordinal suffixes (second through eighth variant of a section
# number) and the transliterated/Thai spellings that map onto them.  Unknown
# suffix words fail loudly instead of being folded into the number: the
# bis/ter distinction changes which section a citation points at.
SUFFIXES = ("bis", "ter", "quater", "quinque", "sex", "septem", "octo")

DEFAULT_SUFFIX_ALIASES = {
    "bis": "bis", "ทวิ": "bis",
    "ter": "ter", "tri": "ter", "tris": "ter", "ตรี": "ter",
    "quater": "quater", "จัตวา": "quater",
    "quinque": "quinque", "quinquies": "quinque", "เบญจ": "quinque",
    "sex": "sex", "sexies": "sex", "ฉ": "sex",
    "septem": "septem", "septies": "septem", "สัตต": "septem",
    "octo": "octo", "octies": "octo", "อัฏฐ": "octo",
}

_THAI_DIGITS = str.maketrans("๐๑๒๓๔๕๖๗๘๙", "0123456789")

_WS_RE = re.compile(r"\s+")


def _slug(name: str) -> str:
    """Lowercase, hyphen-joined law key. Idempotent."""
    cleaned = re.sub(r"[^0-9a-zA-Z.]+", "-", name.strip().lower())
    return cleaned.strip("-.") or "unknown"


def infer_terminology(title: str) -> str:
    t = title.lower()
    if "organic" in t:
        return "organic-law"
    if "emergency decree" in t or "emergency-decree" in t:
        return "emergency-decree"
    if "code" in t:
        return "code"
    if "act" in t:
        return "act"
    return "other"


@dataclass(frozen=True)
class LawCode:
    """One piece of legislation identified by a stable slug id."""

    id: str
    title: str
    terminology: str = "other"

    def __post_init__(self):
        if self.terminology not in TERMINOLOGIES:
            raise StructuralError(
                f"unknown terminology {self.terminology!r} for law {self.id!r}"
            )


@dataclass(frozen=True, order=True)
class SectionId:
    """Canonical section identifier: law slug, number (digits with optional
    slash parts, e.g. ``77/2``) and an optional ordinal suffix (``18 bis`` is
    a different section than ``18``)."""

    law: str
    number: str
    suffix: str | None = None

    def __post_init__(self):
        if self.suffix is not None and self.suffix not in SUFFIXES:
            raise SectionIdError(f"{self.number} {self.suffix}", "unknown suffix")

    def key(self) -> str:
        if self.suffix:
            return f"{self.law}:{self.number} {self.suffix}"
        return f"{self.law}:{self.number}"

    def __str__(self) -> str:  # pragma: no cover - convenience
        return self.key()

    @classmethod
    def from_key(cls, key: str) -> "SectionId":
        m = _KEY_RE.match(key)
        if not m:
            raise SectionIdError(key, "not a canonical key")
        return cls(m.group("law"), m.group("number"), m.group("suffix"))


_KEY_RE = re.compile(
    r"^\s*(?P<law>[0-9a-z][0-9a-z.\-]*)\s*:\s*(?P<number>\d+(?:/\d+)*)"
    r"(?:\s+(?P<suffix>[a-z]+))?\s*$"
)


@dataclass
class ParseRules:
    """Configurable vocabulary used by the parser and the normalizer.

    ``law_aliases`` maps lowercased law names/ids to law slugs; it is extended
    automatically while parsing so references like "... of Securities and
    Exchange Act B.E. 2535" resolve to the right code.
    """

    suffix_aliases: dict[str, str] = field(
        default_factory=lambda: dict(DEFAULT_SUFFIX_ALIASES)
    )
    law_aliases: dict[str, str] = field(default_factory=dict)

    def register_law(self, code: LawCode) -> None:
        for name in (code.id, code.title):
            self.law_aliases[_alias_key(name)] = code.id
        # Titles are frequently cited without the comma before "B.E. ####".
        self.law_aliases[_alias_key(code.title.replace(",", ""))] = code.id

    def resolve_law(self, name: str) -> str:
        name = name.strip().rstrip(".,;")
        for candidate in (name, name.replace(",", "")):
            hit = self.law_aliases.get(_alias_key(candidate))
            if hit:
                return hit
        return _slug(name)

    def suffix_pattern(self) -> str:
        words = sorted(self.suffix_aliases, key=len, reverse=True)
        return "|".join(re.escape(w) for w in words)


def _alias_key(name: str) -> str:
    name = _WS_RE.sub(" ", name.strip().lower())
    if name.startswith("the "):
        name = name[4:]
    return name


def default_rules() -> ParseRules:
    return ParseRules()


@dataclass(frozen=True)
class SectionRecord:
    """One statute section: id, position in the hierarchy, body text and the
    outgoing references extracted from that text."""

    id: SectionId
    hierarchy_path: tuple[tuple[str, str], ...]
    text: str
    references: tuple[SectionId, ...] = ()

    def __post_init__(self):
        if not self.text.strip():
            raise StructuralError(f"section {self.id.key()} has empty text")
        for level, _ in self.hierarchy_path:
            if level not in LEVELS:
                raise StructuralError(
                    f"section {self.id.key()}: unknown hierarchy level {level!r}"
                )


@dataclass
class Corpus:
    """Immutable after construction; insertion order of ``sections`` is
    document order and is preserved by serialization."""

    codes: dict[str, LawCode]
    sections: dict[SectionId, SectionRecord]
    rules: ParseRules = field(default_factory=default_rules, compare=False)

    def __contains__(self, sid: SectionId) -> bool:
        return sid in self.sections

    def resolve(self, sid: SectionId) -> SectionRecord | None:
        return self.sections.get(sid)

    def in_order(self) -> list[SectionRecord]:
        return list(self.sections.values())

    def sections_of(self, law: str) -> list[SectionRecord]:
        return [r for r in self.sections.values() if r.id.law == law]

    def unresolved_references(self) -> list[tuple[SectionId, SectionId]]:
        """(source, target) pairs whose target does not resolve here.

        Unresolved references are retained, never dropped: depth accounting
        downstream must distinguish "no reference" from "unresolvable".
        """
        out = []
        for rec in self.sections.values():
            for ref in rec.references:
                if ref not in self.sections:
                    out.append((rec.id, ref))
        return out

    # ------------------------------------------------------------------
    # JSONL interchange: one header line per law code (no "number" key),
    # then one line per section with {law, number, suffix, hierarchy_path,
    # text, references}.
    # ------------------------------------------------------------------

    def dump_jsonl(self, fp: TextIO) -> None:
        for code in self.codes.values():
            fp.write(json.dumps(
                {"law": code.id, "title": code.title, "terminology": code.terminology},
                ensure_ascii=False, sort_keys=True))
            fp.write("\n")
        for rec in self.sections.values():
            fp.write(json.dumps(self._record_obj(rec), ensure_ascii=False, sort_keys=True))
            fp.write("\n")

    def _record_obj(self, rec: SectionRecord) -> dict:
        return {
            "law": rec.id.law,
            "number": rec.id.number,
            "suffix": rec.id.suffix,
            "hierarchy_path": [[lvl, label] for lvl, label in rec.hierarchy_path],
            "text": rec.text,
            "references": [
                {
                    "law": ref.law,
                    "number": ref.number,
                    "suffix": ref.suffix,
                    "resolved": ref in self.sections,
                }
                for ref in rec.references
            ],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fp:
            self.dump_jsonl(fp)

    @classmethod
    def load_jsonl(cls, fp: Iterable[str], rules: ParseRules | None = None) -> "Corpus":
        rules = rules or default_rules()
        codes: dict[str, LawCode] = {}
        sections: dict[SectionId, SectionRecord] = {}
        for lineno, line in enumerate(fp, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc}", line=lineno) from exc
            if "number" not in obj:
                code = LawCode(obj["law"], obj.get("title", obj["law"]),
                               obj.get("terminology", "other"))
                codes[code.id] = code
                rules.register_law(code)
                continue
            sid = SectionId(obj["law"], obj["number"], obj.get("suffix"))
            if sid in sections:
                raise StructuralError(f"duplicate section {sid.key()} (line {lineno})")
            refs = tuple(
                SectionId(r["law"], r["number"], r.get("suffix"))
                for r in obj.get("references", [])
            )
            sections[sid] = SectionRecord(
                id=sid,
                hierarchy_path=tuple((lvl, label) for lvl, label in obj.get("hierarchy_path", [])),
                text=obj["text"],
                references=refs,
            )
            if sid.law not in codes:
                code = LawCode(sid.law, sid.law)
                codes[code.id] = code
                rules.register_law(code)
        return cls(codes=codes, sections=sections, rules=rules)

    @classmethod
    def open(cls, path, rules: ParseRules | None = None) -> "Corpus":
        with open(path, "r", encoding="utf-8") as fp:
            return cls.load_jsonl(fp, rules=rules)


# ----------------------------------------------------------------------
# Section id normalization
# ----------------------------------------------------------------------

_LEAD_WORDS_RE = re.compile(
    r"^(?:(?:the|of|sections?|sec\.?|s\.|มาตรา|ข้อ)\s+)+", re.IGNORECASE
)
_NUMBER_RE = re.compile(r"^(?P<number>\d+(?:\s*/\s*\d+)*)")


def _canon_number(raw: str) -> str:
    parts = [p.strip() for p in raw.split("/")]
    return "/".join(str(int(p)) for p in parts)


def normalize_section_id(
    raw: str, default_law: str, rules: ParseRules | None = None
) -> SectionId:
    """Normalize a free-form section mention to a canonical :class:`SectionId`.

    Idempotent; strips honorific/ordinal noise and whitespace/case variation;
    maps suffix words through the alias table; attaches ``default_law`` when
    the mention names no law.  Sub-item parentheticals like ``186(2)`` are
    dropped: matching is whole-section.

    Raises :class:`SectionIdError` (carrying the raw string) when the mention
    cannot be parsed; callers decide whether that counts as a wrong citation.
    """
    rules = rules or default_rules()
    if not raw or not raw.strip():
        raise SectionIdError(raw, "empty")
    s = _WS_RE.sub(" ", raw.translate(_THAI_DIGITS).strip())

    m = _KEY_RE.match(s.lower())
    if m:
        suffix_word = m.group("suffix")
        suffix = None
        if suffix_word:
            suffix = rules.suffix_aliases.get(suffix_word)
            if suffix is None:
                raise SectionIdError(raw, f"unknown suffix {suffix_word!r}")
        return SectionId(_slug(m.group("law")), _canon_number(m.group("number")), suffix)

    s = _LEAD_WORDS_RE.sub("", s)
    m = _NUMBER_RE.match(s)
    if not m:
        raise SectionIdError(raw, "no section number found")
    number = _canon_number(m.group("number"))
    rest = s[m.end():].strip()

    suffix: str | None = None
    law = default_law
    while rest:
        if rest.startswith("("):
            close = rest.find(")")
            if close < 0:
                raise SectionIdError(raw, "unbalanced parenthetical")
            rest = rest[close + 1:].strip()
            continue
        low = rest.lower()
        if low.startswith("of "):
            law = rules.resolve_law(rest[3:])
            rest = ""
            continue
        token = rest.split(" ", 1)[0].rstrip(".,;")
        mapped = rules.suffix_aliases.get(token.lower())
        if mapped is None or suffix is not None:
            raise SectionIdError(raw, f"unexpected token {token!r}")
        suffix = mapped
        rest = rest[len(token):].lstrip(".,; ")
    return SectionId(_slug(law), number, suffix)


# ----------------------------------------------------------------------
# Reference extraction
# ----------------------------------------------------------------------

_RANGE_WORDS = ("to", "through", "ถึง")

# Bare terminology words refer to the enclosing legislation.
_GENERIC_LAW_WORDS = frozenset(
    {"code", "act", "this code", "this act", "emergency decree", "organic law",
     "same code", "same act"}
)

_PAREN = r"(?:\s*\([^)\n]{0,20}\))?"


def _reference_re(rules: ParseRules) -> re.Pattern:
    sfx = rules.suffix_pattern()
    item = rf"\d+(?:/\d+)*{_PAREN}(?:\s+(?i:{sfx})\b)?{_PAREN}"
    sep = r"\s*(?:(?:,|;|&|(?i:and|or|to|through)|และ|หรือ|ถึง)\s*)+"
    word = r"(?:(?i:sections?)|มาตรา)"
    # Law names: capitalized words plus lowercase connectors, optional
    # "(No. #)" and "B.E. ####" tails.  Digits are confined to those tails so
    # enumerated section lists never leak into the name, and the leading
    # capital keeps phrases like "of this code" from being taken as a name.
    law = (
        r"[A-Z][A-Za-z'&,-]*(?:\s+[A-Za-z'&,-]+)*"
        r"(?:\s*\((?i:No)\.\s*\d+\))?(?:,?\s+B\.E\.\s*\d{4})?"
    )
    return re.compile(
        rf"\b{word}\s+(?P<items>{item}(?:{sep}(?:{word}\s+)?{item})*)"
        rf"(?:\s+(?i:of)\s+(?:(?i:the)\s+)?(?P<law>{law}))?"
    )


def _item_re(rules: ParseRules) -> re.Pattern:
    sfx = rules.suffix_pattern()
    return re.compile(
        rf"(?P<number>\d+(?:/\d+)*){_PAREN}(?:\s+(?P<suffix>{sfx})\b)?{_PAREN}",
        re.IGNORECASE,
    )


def extract_references(
    text: str, law: str, rules: ParseRules | None = None
) -> list[SectionId]:
    """Extract section references from a section body.

    Ordered by first occurrence and deduplicated.  Conjunctive ranges
    ("Sections 552 to 555") are expanded by enumeration; "or"/"and" lists are
    enumerated, never ranged.  References naming another law resolve to that
    law via the alias table; unknown law names are kept under a slugged key
    (they surface later as unresolved, they are not dropped).
    """
    rules = rules or default_rules()
    text = text.translate(_THAI_DIGITS)
    out: list[SectionId] = []
    seen: set[SectionId] = set()
    item_re = _item_re(rules)

    for m in _reference_re(rules).finditer(text):
        target_law = law
        name = m.group("law")
        if name and _alias_key(name) not in _GENERIC_LAW_WORDS:
            target_law = rules.resolve_law(name)
        items = m.group("items")
        prev: tuple[str, str | None] | None = None
        pos = 0
        while pos < len(items):
            im = item_re.search(items, pos)
            if not im:
                break
            gap = items[pos:im.start()].lower()
            number = _canon_number(im.group("number"))
            suffix_word = im.group("suffix")
            suffix = rules.suffix_aliases.get(suffix_word.lower()) if suffix_word else None
            is_range = any(w in gap.split() or w in gap for w in _RANGE_WORDS)
            if (
                is_range
                and prev is not None
                and prev[1] is None
                and suffix is None
                and "/" not in prev[0]
                and "/" not in number
                and int(prev[0]) < int(number)
            ):
                for n in range(int(prev[0]) + 1, int(number)):
                    _push(out, seen, SectionId(target_law, str(n)))
            _push(out, seen, SectionId(target_law, number, suffix))
            prev = (number, suffix)
            pos = im.end()
    return out


def _push(out: list, seen: set, sid: SectionId) -> None:
    if sid not in seen:
        seen.add(sid)
        out.append(sid)


# ----------------------------------------------------------------------
# Marker-format parser
# ----------------------------------------------------------------------

_MARKER_RE = re.compile(r"^@(?P<level>[a-z]+)(?:\s+(?P<label>.*))?$")
_MARKER_LEVELS = ("code",) + LEVELS + ("section",)


def parse_corpus(raw: str | Iterable[str], rules: ParseRules | None = None) -> Corpus:
    """Parse marker-annotated legislation text into a :class:`Corpus`.

    Grammar: one line per hierarchy event — ``@code id | title | terminology``
    (title and terminology optional), ``@book/@title/@chapter/@division/
    @subsection label``, ``@section number [suffix]`` — with the section body
    running until the next marker.  Body lines are preserved byte-for-byte;
    non-blank lines outside any section (front matter) are ignored.

    Raises :class:`ParseError` with the line number for malformed markers and
    :class:`StructuralError` for duplicate section ids within a code.
    """
    rules = rules or default_rules()
    if isinstance(raw, str):
        lines: Iterator[str] = iter(raw.splitlines())
    else:
        lines = iter(line.rstrip("\r\n") for line in raw)

    codes: dict[str, LawCode] = {}
    drafts: list[dict] = []  # {"sid", "path", "lines", "line_no"}
    current_law: LawCode | None = None
    hierarchy: dict[str, str] = {}
    open_section: dict | None = None

    def close_section() -> None:
        nonlocal open_section
        if open_section is None:
            return
        if not "\n".join(open_section["lines"]).strip():
            raise StructuralError(
                f"section {open_section['sid'].key()} "
                f"(line {open_section['line_no']}) has empty body"
            )
        drafts.append(open_section)
        open_section = None

    for line_no, line in enumerate(lines, start=1):
        if line.startswith("@"):
            m = _MARKER_RE.match(line.strip())
            if not m or m.group("level") not in _MARKER_LEVELS:
                raise ParseError(f"malformed marker {line.strip()!r}", line=line_no)
            level = m.group("level")
            label = (m.group("label") or "").strip()
            if not label:
                raise ParseError(f"marker @{level} has no label", line=line_no)
            close_section()

            if level == "code":
                parts = [p.strip() for p in label.split("|")]
                law_id = _slug(parts[0])
                title = parts[1] if len(parts) > 1 and parts[1] else parts[0]
                terminology = (
                    parts[2] if len(parts) > 2 and parts[2] else infer_terminology(title)
                )
                if terminology not in TERMINOLOGIES:
                    raise ParseError(
                        f"unknown terminology {terminology!r}", line=line_no
                    )
                current_law = LawCode(law_id, title, terminology)
                if law_id in codes:
                    raise StructuralError(f"duplicate law code {law_id!r} (line {line_no})")
                codes[law_id] = current_law
                rules.register_law(current_law)
                hierarchy = {}
            elif level == "section":
                if current_law is None:
                    raise ParseError("@section before any @code", line=line_no)
                try:
                    sid = normalize_section_id(label, current_law.id, rules)
                except SectionIdError as exc:
                    raise ParseError(f"bad section label: {exc}", line=line_no) from exc
                path = tuple(
                    (lvl, hierarchy[lvl]) for lvl in LEVELS if lvl in hierarchy
                )
                open_section = {
                    "sid": sid, "path": path, "lines": [], "line_no": line_no,
                }
            else:
                if current_law is None:
                    raise ParseError(f"@{level} before any @code", line=line_no)
                # A new level clears everything nested beneath it.
                depth = LEVELS.index(level)
                hierarchy = {
                    lvl: lab for lvl, lab in hierarchy.items()
                    if LEVELS.index(lvl) < depth
                }
                hierarchy[level] = label
        else:
            if open_section is not None:
                open_section["lines"].append(line)
            elif line.strip():
                logger.debug("ignoring front-matter line %d: %r", line_no, line[:60])
    close_section()

    sections: dict[SectionId, SectionRecord] = {}
    for draft in drafts:
        sid = draft["sid"]
        if sid in sections:
            raise StructuralError(
                f"duplicate section {sid.key()} (line {draft['line_no']})"
            )
        text = "\n".join(draft["lines"])
        refs = tuple(
            r for r in extract_references(text, sid.law, rules) if r != sid
        )
        sections[sid] = SectionRecord(
            id=sid, hierarchy_path=draft["path"], text=text, references=refs
        )
    return Corpus(codes=codes, sections=sections, rules=rules)
