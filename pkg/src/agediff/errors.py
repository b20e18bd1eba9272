"""Exception hierarchy shared across the package."""


class AgediffError(Exception):
    """Base class for all package-specific errors."""


class ManifestParseError(AgediffError):
    """Raised when a manifest file line cannot be parsed."""

    def __init__(self, path, line_number, reason):
        self.path = str(path)
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"{self.path}:{line_number}: {reason}")


class ValidationError(AgediffError):
    """A domain invariant does not hold."""


class ConfigurationError(AgediffError):
    """A configuration value is out of its legal range or inconsistent."""


class SpanResolutionError(AgediffError):
    """A prompt word could not be located in the tokenizer offset map."""


class TrainingDivergedError(AgediffError):
    """Fine-tuning hit a non-finite loss."""

    def __init__(self, step, message="non-finite loss"):
        self.step = step
        super().__init__(f"{message} at step {step}")


class AdapterStateError(AgediffError):
    """Adapter attach/merge/detach called in an illegal order."""


class MetricError(AgediffError):
    """A metric was requested on inputs it is not defined for."""


class StageError(AgediffError):
    """Wraps a failure from one stage of the editing pipeline.

    The stage name lets callers report which component failed without
    parsing the underlying message.
    """

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
