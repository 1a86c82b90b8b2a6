from __future__ import annotations


class InsightEngineError(Exception):
    """Base error. ``code`` is machine readable, the message is for people."""

    default_code = "error"

    def __init__(
        self,
        message: str,
        *,
        code: str | None = None,
        stage: str | None = None,
        chunk: int | None = None,
    ) -> None:
        super().__init__(message)
        self.code = code or self.default_code
        self.stage = stage
        self.chunk = chunk

    def __str__(self) -> str:
        text = super().__str__()
        where = []
        if self.stage:
            where.append(f"stage={self.stage}")
        if self.chunk is not None:
            where.append(f"chunk={self.chunk}")
        if where:
            return f"{text} ({', '.join(where)})"
        return text


class ConfigError(InsightEngineError):
    default_code = "config"


class DatasetError(InsightEngineError):
    default_code = "dataset"


class IngestError(InsightEngineError):
    default_code = "io"


class PreprocessError(InsightEngineError):
    default_code = "preprocess"

    def __init__(self, message: str, *, step: int | None = None, **kwargs) -> None:
        super().__init__(message, **kwargs)
        self.step = step


class InsightError(InsightEngineError):
    default_code = "insight"


class AnonymizeError(InsightEngineError):
    default_code = "anonymize"


class ChunkError(InsightEngineError):
    default_code = "row_too_large"


class LlmError(InsightEngineError):
    default_code = "transport"


class NarrativeError(InsightEngineError):
    default_code = "budget_exceeded"


class PipelineError(InsightEngineError):
    default_code = "pipeline"


class FixtureError(InsightEngineError):
    default_code = "unplantable"
