"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class LexragError(Exception):
    """Base class for all toolkit errors."""


class ParseError(LexragError):
    """Malformed input text. Carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StructuralError(LexragError):
    """Internally inconsistent data (duplicate ids, unknown ids, bad metadata)."""


class ConfigError(LexragError):
    """Invalid configuration value or combination."""


class UsageError(LexragError):
    """Caller violated an operation precondition (misaligned inputs, bad arguments)."""


class SectionIdError(LexragError):
    """A section reference could not be normalized. Keeps the raw string so
    callers can decide whether to count it as a wrong citation."""

    def __init__(self, raw: str, reason: str = ""):
        self.raw = raw
        msg = f"cannot normalize section reference {raw!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class RunError(LexragError):
    """A benchmark run failed (endpoint unreachable, error budget exceeded)."""


class TransportError(RunError):
    """Endpoint request failed after the configured retries."""


class JudgeError(LexragError):
    """Judge output could not be parsed into a valid verdict after retries."""
