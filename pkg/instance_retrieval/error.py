from typing import Any, Dict, Optional


class RetrievalPipelineError(Exception):
    """
    Base class for every error raised by the retrieval pipeline.

    Each subclass maps to a process exit status and can be rendered as a
    machine-readable record for `errors.json`.
    """

    exit_code = 2

    def __init__(self, message: str, extensions: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.extensions = extensions or {}

    def to_record(self) -> Dict[str, Any]:
        return {
            "error_type": type(self).__name__,
            "message": self.message,
            "exit_code": self.exit_code,
            **self.extensions,
        }


class ConfigurationError(RetrievalPipelineError, ValueError):
    exit_code = 1


class UsageError(RetrievalPipelineError, ValueError):
    pass


class InputError(RetrievalPipelineError, ValueError):
    pass


class PlacementError(RetrievalPipelineError):
    pass


class NumericGuardError(RetrievalPipelineError, ArithmeticError):
    pass


class DivergenceError(RetrievalPipelineError, ArithmeticError):
    pass


class EncodingError(RetrievalPipelineError):
    def __init__(self, message: str, sample_id: int, **extensions):
        super().__init__(message, extensions={"sample_id": sample_id, **extensions})
        self.sample_id = sample_id


class StageFailure(RetrievalPipelineError):
    """
    Raised by the stage executor after a stage failed and its error record has
    been written. `original_error` is the exception the stage raised.
    """

    def __init__(self, stage: str, original_error: BaseException, **extensions):
        super().__init__(
            f"stage '{stage}' failed: {original_error}",
            extensions={"stage": stage, **extensions},
        )
        self.stage = stage
        self.original_error = original_error

    @property
    def exit_code(self) -> int:  # type: ignore[override]
        if isinstance(self.original_error, ConfigurationError):
            return ConfigurationError.exit_code
        return 2

    def to_record(self) -> Dict[str, Any]:
        record = super().to_record()
        record["original_error_type"] = type(self.original_error).__name__
        if isinstance(self.original_error, RetrievalPipelineError):
            record.update(
                {k: v for k, v in self.original_error.extensions.items() if k not in record}
            )
        return record


class AcceptanceCheckFailed(RetrievalPipelineError):
    exit_code = 3
