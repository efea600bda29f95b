"""Exception hierarchy shared across the pipeline.

Errors are split by what the caller can do about them: contract errors are
bugs at the call site, input errors need a different input, transport errors
may be retried, and unavailable-adapter errors need a config or install fix.
"""

from __future__ import annotations


class CapeditError(Exception):
    """Base class for all package errors."""


class ContractError(CapeditError):
    """A caller violated an operation precondition (e.g. shape mismatch)."""


class InputFormatError(CapeditError):
    """An input file or payload could not be decoded."""

    def __init__(self, message: str, source: str | None = None):
        self.source = source
        super().__init__(message if source is None else f"{message} (source: {source})")


class AdapterUnavailableError(CapeditError):
    """A model adapter cannot serve requests.

    ``reason`` is ``"config"`` when the adapter was never set up correctly
    (missing package, missing weights path) and ``"runtime"`` when a
    previously working adapter failed.
    """

    def __init__(self, message: str, reason: str = "config"):
        if reason not in ("config", "runtime"):
            raise ValueError(f"reason must be 'config' or 'runtime', got {reason!r}")
        self.reason = reason
        super().__init__(f"[{reason}] {message}")


class TransportError(CapeditError):
    """A remote endpoint failed in a way that may succeed on retry."""

    retryable = True


class TemplateError(CapeditError):
    """A prompt template is malformed or a required placeholder is unbound."""


class CaptionParseError(CapeditError):
    """An LLM completion yielded zero captions; carries the raw text."""

    def __init__(self, message: str, raw_completion: str):
        self.raw_completion = raw_completion
        super().__init__(message)


class ScheduleError(CapeditError):
    """A noise schedule violates its invariants or a timestep is out of range."""


class DivergenceError(CapeditError):
    """A latent became non-finite during a trajectory; carries the step index."""

    def __init__(self, message: str, step_index: int):
        self.step_index = step_index
        super().__init__(f"{message} (step {step_index})")


class CacheMissError(CapeditError):
    """A rerun was requested but the cached inversion is gone; run a full edit."""


class ConfigError(CapeditError):
    """The adapter/pipeline configuration is missing or inconsistent."""
