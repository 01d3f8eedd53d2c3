"""Exception hierarchy.

Validation-type errors (bad input, bad config) map to CLI exit code 1;
everything else under ``CuratorError`` is a runtime failure (exit code 2).
"""

from __future__ import annotations


class CuratorError(Exception):
    """Base class for all errors raised by signcurator."""


class ValidationError(CuratorError):
    """Input data violates a documented invariant."""


class ManifestParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class ConfigError(ValidationError):
    """Configuration is missing, malformed or inconsistent."""


class ModelSeparationError(ConfigError):
    """Curator and judge would be served by the same model."""


class TemplateError(ValidationError):
    """A prompt template cannot be rendered."""


class InvalidMediaError(CuratorError):
    """Media cannot be sampled, decoded or normalized."""


class IngestionError(CuratorError):
    def __init__(self, message: str, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


class GatewayError(CuratorError):
    """Base for model-endpoint failures."""


class RequestError(GatewayError):
    """Non-retryable HTTP failure (4xx other than 429)."""

    def __init__(self, message: str, status_code: int | None = None):
        super().__init__(message)
        self.status_code = status_code


class ProtocolError(GatewayError):
    """Response body does not match the chat-completions wire schema."""


class GatewayUnavailableError(GatewayError):
    """Retries exhausted on a transient failure."""


class UnparseableResponseError(CuratorError):
    """A model reply could not be mapped to a stage verdict."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class ProcessingError(CuratorError):
    """A stage could not produce a verdict for one video."""


class StateMachineError(CuratorError):
    """A verdict was applied out of order or to a terminal record."""


class ResumeError(ValidationError):
    """A checkpoint is incompatible with the running configuration."""


class PipelineHaltedError(CuratorError):
    """The pipeline stopped early; partial results were checkpointed."""

    def __init__(self, message: str, records=None):
        super().__init__(message)
        self.records = list(records or [])


class CoverageError(ValidationError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        shown = ", ".join(self.missing[:20])
        more = f" (+{len(self.missing) - 20} more)" if len(self.missing) > 20 else ""
        super().__init__(f"no prediction for gold ids: {shown}{more}")


class UndefinedMetricError(ValidationError):
    """Metrics requested on an empty confusion matrix."""


class EmptyReportError(ValidationError):
    """No scorable pairs for an agreement report."""


class FeatureUnavailableError(CuratorError):
    """An optional external service could not be reached."""
