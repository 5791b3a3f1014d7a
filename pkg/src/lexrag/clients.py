"""Generator/judge/embedding endpoint clients.

The HTTP contract is one POST endpoint per role: JSON request
``{"prompt"|"inputs": ..., "parameters": {...}}``, JSON response
``{"text": ...}`` or ``{"vectors": [...]}``. Stub clients make full runs
reproducible offline; they are selected by ``kind`` in the endpoint config.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import requests

from .errors import ConfigError, TransportError

logger = logging.getLogger(__name__)


@dataclass
class EndpointConfig:
    kind: str = "http"
    url: str = ""
    headers: dict = field(default_factory=dict)
    model: str = ""
    temperature: float | None = None
    max_tokens: int | None = None
    seed: int | None = None
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.5

    def parameters(self) -> dict:
        params = {}
        if self.model:
            params["model"] = self.model
        if self.temperature is not None:
            params["temperature"] = self.temperature
        if self.max_tokens is not None:
            params["max_tokens"] = self.max_tokens
        if self.seed is not None:
            params["seed"] = self.seed
        return params


class HttpEndpoint:
    """POST with bounded retries and deterministic exponential backoff."""

    def __init__(self, config: EndpointConfig):
        if not config.url:
            raise ConfigError("http endpoint needs a url")
        self.config = config
        self._session = requests.Session()

    def post(self, payload: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.config.max_retries):
            try:
                resp = self._session.post(
                    self.config.url,
                    json=payload,
                    headers=self.config.headers,
                    timeout=self.config.timeout,
                )
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, ValueError) as exc:
                last = exc
                wait = self.config.backoff * (2 ** attempt)
                logger.warning(
                    "request to %s failed (attempt %d/%d): %s",
                    self.config.url, attempt + 1, self.config.max_retries, exc,
                )
                if attempt + 1 < self.config.max_retries:
                    time.sleep(wait)
        raise TransportError(f"{self.config.url} unreachable after "
                             f"{self.config.max_retries} attempts: {last}")


class HttpGenerator:
    def __init__(self, config: EndpointConfig):
        self.endpoint = HttpEndpoint(config)
        self.config = config

    def complete(self, prompt: str) -> str:
        data = self.endpoint.post(
            {"prompt": prompt, "parameters": self.config.parameters()}
        )
        if "text" not in data:
            raise TransportError(f"generator response has no 'text' field: {data}")
        return data["text"]


class HttpJudge:
    def __init__(self, config: EndpointConfig):
        self.endpoint = HttpEndpoint(config)
        self.config = config

    def assess(self, prompt: str, **_fields) -> str:
        data = self.endpoint.post(
            {"prompt": prompt, "parameters": self.config.parameters()}
        )
        if "text" not in data:
            raise TransportError(f"judge response has no 'text' field: {data}")
        return data["text"]


class HttpEmbedder:
    def __init__(self, config: EndpointConfig):
        self.endpoint = HttpEndpoint(config)
        self.config = config

    def embed(self, texts: list[str]) -> list[list[float]]:
        data = self.endpoint.post(
            {"inputs": texts, "parameters": self.config.parameters()}
        )
        if "vectors" not in data:
            raise TransportError(f"embedder response has no 'vectors' field: {data}")
        return data["vectors"]


# ----------------------------------------------------------------------
# Stubs (offline, deterministic)
# ----------------------------------------------------------------------

class EchoGenerator:
    """Deterministic offline generator: answers with the question it finds in
    the prompt and cites every identifier token present in the context."""

    def complete(self, prompt: str) -> str:
        question = ""
        for line in reversed(prompt.splitlines()):
            if line.startswith("Question:"):
                question = line[len("Question:"):].strip()
                break
        tokens = _context_tokens(prompt)
        citations = "\n".join(f"[[{t}]]" for t in tokens)
        return f"ANSWER:\n{question or 'No question found.'}\n\nCITATIONS:\n{citations}\n"


class CitationFaithfulGenerator:
    """Cites exactly the sections provided as context, nothing else."""

    def __init__(self, answer: str = "Refer to the cited provisions."):
        self.answer = answer

    def complete(self, prompt: str) -> str:
        tokens = _context_tokens(prompt)
        citations = "\n".join(f"[[{t}]]" for t in tokens)
        return f"ANSWER:\n{self.answer}\n\nCITATIONS:\n{citations}\n"


def _context_tokens(prompt: str) -> list[str]:
    """Identifier tokens of the final context block (exemplar blocks are
    cut off by scanning back to the last 'Context:' heading)."""
    from .retrieval import ID_TOKEN_RE

    idx = prompt.rfind("Context:")
    scope = prompt if idx < 0 else prompt[idx:]
    end = scope.find("Question:")
    if end >= 0:
        scope = scope[:end]
    out = []
    seen = set()
    for tok in ID_TOKEN_RE.findall(scope):
        if tok not in seen:
            seen.add(tok)
            out.append(tok)
    return out


class FixedJudge:
    """Always returns the same verdict."""

    def __init__(self, coverage: int = 100, contradiction: int = 0):
        self.coverage = coverage
        self.contradiction = contradiction

    def assess(self, prompt: str, **_fields) -> str:
        return json.dumps(
            {"coverage": self.coverage, "contradiction": self.contradiction,
             "rationale": "fixed verdict"}
        )


class EqualityJudge:
    """Full coverage iff the generated answer equals the gold answer."""

    def assess(self, prompt: str, *, gold_answer: str = "", answer: str = "", **_fields) -> str:
        if answer.strip() == gold_answer.strip():
            return json.dumps({"coverage": 100, "contradiction": 0})
        return json.dumps({"coverage": 0, "contradiction": 1})


class UnreachableClient:
    """Fails every call; stands in for an endpoint that is down."""

    def complete(self, prompt: str) -> str:
        raise TransportError("endpoint unreachable")

    def assess(self, prompt: str, **_fields) -> str:
        raise TransportError("endpoint unreachable")

    def embed(self, texts: list[str]) -> list[list[float]]:
        raise TransportError("endpoint unreachable")


GENERATOR_KINDS = {
    "echo": lambda cfg: EchoGenerator(),
    "citation_faithful": lambda cfg: CitationFaithfulGenerator(),
    "unreachable": lambda cfg: UnreachableClient(),
    "http": lambda cfg: HttpGenerator(cfg),
}

JUDGE_KINDS = {
    "fixed": lambda cfg: FixedJudge(),
    "equality": lambda cfg: EqualityJudge(),
    "unreachable": lambda cfg: UnreachableClient(),
    "http": lambda cfg: HttpJudge(cfg),
}


def make_generator(config: EndpointConfig):
    try:
        return GENERATOR_KINDS[config.kind](config)
    except KeyError:
        raise ConfigError(f"unknown generator kind {config.kind!r}") from None


def make_judge(config: EndpointConfig):
    try:
        return JUDGE_KINDS[config.kind](config)
    except KeyError:
        raise ConfigError(f"unknown judge kind {config.kind!r}") from None
