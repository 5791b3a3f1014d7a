"""Declarative run configuration: one TOML document covers every knob.

Every report embeds ``config_hash``, the sha256 of the resolved config, so
artifacts can always be traced back to the exact settings that produced them.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .chunking import ChunkingSpec
from .clients import EndpointConfig
from .errors import ConfigError
from .evaluation import DEFAULT_JUDGE_PROMPT, MODES
from .refgraph import AugmentSpec
from .retrieval import DEFAULT_LCLM_PROMPT, TOKENIZERS

RETRIEVER_KINDS = ("bm25", "fused", "lclm", "none")


@dataclass
class SampleSpec:
    fraction: float = 1.0
    stratify: bool = True

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ConfigError("sample fraction must be in (0, 1]")


@dataclass
class RetrieverConfig:
    kind: str = "bm25"
    k1: float = 1.5
    b: float = 0.75
    tokenizer: str = "whitespace"
    weights: dict[str, float] = field(
        default_factory=lambda: {"dense": 0.4, "multi": 0.4, "sparse": 0.2}
    )
    embeddings: str = ""        # per-chunk embedding JSONL (fused)
    query_embeddings: str = ""  # per-query embedding JSONL (fused)
    lclm_k: int = 20            # ids requested from the long-context retriever

    def __post_init__(self):
        if self.kind not in RETRIEVER_KINDS:
            raise ConfigError(f"unknown retriever kind {self.kind!r}")
        if self.tokenizer not in TOKENIZERS:
            raise ConfigError(f"unknown tokenizer {self.tokenizer!r}")


@dataclass
class JudgeConfig(EndpointConfig):
    retries: int = 2


@dataclass
class PromptConfig:
    system: str = (
        "You answer legal questions from the provided statute sections and"
        " cite the sections you used.\nRespond exactly in this format:\n"
        "ANSWER:\n<your answer>\n\nCITATIONS:\n[[law:number]] one token per line,"
        " copied from the context."
    )
    judge: str = DEFAULT_JUDGE_PROMPT
    lclm: str = DEFAULT_LCLM_PROMPT


@dataclass
class RunConfig:
    mode: str = "structured_rag"
    top_k: int = 10
    few_shot: int = 3
    seed: int = 0
    workers: int = 1
    ks: tuple[int, ...] = (1, 5, 10)
    analytics_k: int = 10
    error_threshold: float = 0.2
    per_sample_reports: bool = True
    freetext_citations: bool = False
    sample: SampleSpec | None = None
    chunking: ChunkingSpec = field(
        default_factory=lambda: ChunkingSpec(strategy="hierarchy_aware")
    )
    retriever: RetrieverConfig = field(default_factory=RetrieverConfig)
    augment_enabled: bool = False
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    generator: EndpointConfig = field(
        default_factory=lambda: EndpointConfig(kind="echo", temperature=0.5, max_tokens=2048)
    )
    judge: JudgeConfig = field(
        default_factory=lambda: JudgeConfig(kind="fixed", temperature=0.3)
    )
    prompts: PromptConfig = field(default_factory=PromptConfig)
    paths: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.few_shot < 0:
            raise ConfigError("few_shot must be >= 0")
        if not 0 <= self.error_threshold <= 1:
            raise ConfigError("error_threshold must be in [0, 1]")
        if self.mode == "naive_rag" and self.chunking.strategy == "hierarchy_aware":
            raise ConfigError("naive_rag needs a naive chunking strategy")

    def path(self, name: str, required: bool = True) -> Path | None:
        value = self.paths.get(name, "")
        if not value:
            if required:
                raise ConfigError(f"config is missing paths.{name}")
            return None
        return Path(value)

    def resolved(self) -> dict:
        obj = asdict(self)
        obj["ks"] = list(self.ks)
        return obj

    def config_hash(self) -> str:
        """Hash of the semantic settings. File locations and worker count do
        not change what a run computes, so they are excluded: the same
        experiment in a different directory hashes identically."""
        obj = self.resolved()
        obj.pop("paths", None)
        obj.pop("workers", None)
        canonical = json.dumps(obj, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _dataclass_from(cls, obj: dict, where: str):
    try:
        return cls(**obj)
    except TypeError as exc:
        raise ConfigError(f"bad [{where}] section: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    run = dict(doc.get("run", {}))
    sample = run.pop("sample", None)
    kwargs: dict = {}
    for key in (
        "mode", "top_k", "few_shot", "seed", "workers", "analytics_k",
        "error_threshold", "per_sample_reports", "freetext_citations",
    ):
        if key in run:
            kwargs[key] = run.pop(key)
    if "ks" in run:
        kwargs["ks"] = tuple(run.pop("ks"))
    if run:
        raise ConfigError(f"unknown [run] keys: {sorted(run)}")
    if sample is not None:
        kwargs["sample"] = _dataclass_from(SampleSpec, sample, "run.sample")
    if "chunking" in doc:
        kwargs["chunking"] = _dataclass_from(ChunkingSpec, doc["chunking"], "chunking")
    if "retriever" in doc:
        kwargs["retriever"] = _dataclass_from(RetrieverConfig, doc["retriever"], "retriever")
    if "augment" in doc:
        aug = dict(doc["augment"])
        kwargs["augment_enabled"] = bool(aug.pop("enabled", True))
        kwargs["augment"] = _dataclass_from(AugmentSpec, aug, "augment")
    if "generator" in doc:
        kwargs["generator"] = _dataclass_from(EndpointConfig, doc["generator"], "generator")
    if "judge" in doc:
        kwargs["judge"] = _dataclass_from(JudgeConfig, doc["judge"], "judge")
    if "prompts" in doc:
        kwargs["prompts"] = _dataclass_from(PromptConfig, doc["prompts"], "prompts")
    kwargs["paths"] = {k: str(v) for k, v in doc.get("paths", {}).items()}
    return RunConfig(**kwargs)


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as TOML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        dotted, raw = item.split("=", 1)
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        node = doc
        parts = dotted.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} crosses a non-table value")
        node[parts[-1]] = value
    return doc


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    with open(path, "rb") as fp:
        doc = tomllib.load(fp)
    if overrides:
        doc = apply_overrides(doc, overrides)
    return config_from_dict(doc)
