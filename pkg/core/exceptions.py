"""Custom exceptions for the expert-teacher-student anomaly detector."""

from typing import Dict, List, Optional, Sequence


class EtsError(Exception):
    """Base exception for the anomaly detection toolkit."""

    def __init__(self, message: str, error_code: Optional[int] = None) -> None:
        """Initialize exception.

        Args:
            message: Error message
            error_code: Optional error code
        """
        super().__init__(message)
        self.message = message
        self.error_code = error_code


class DatasetLayoutError(EtsError):
    """Raised when a dataset folder or manifest does not match the expected layout."""

    def __init__(self, message: str, path: Optional[str] = None) -> None:
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message, 1001)
        self.path = path


class ImageReadError(EtsError):
    """Raised when an image or mask file cannot be decoded."""

    def __init__(self, file_path: str, reason: str) -> None:
        super().__init__(f"Cannot read image '{file_path}': {reason}", 1002)
        self.file_path = file_path
        self.reason = reason


class SynthesisError(EtsError):
    """Raised when anomaly synthesis cannot proceed."""

    def __init__(self, message: str) -> None:
        super().__init__(message, 1003)


class WeightLoadError(EtsError):
    """Raised when pretrained encoder weights are missing or do not fit."""

    def __init__(self, message: str, source: Optional[str] = None) -> None:
        super().__init__(message, 1004)
        self.source = source


class ShapeMismatchError(EtsError):
    """Raised when tensors do not have the shapes an operation requires."""

    def __init__(
        self,
        message: str,
        expected: Optional[Sequence[int]] = None,
        actual: Optional[Sequence[int]] = None,
    ) -> None:
        if expected is not None or actual is not None:
            message = f"{message} (expected {expected}, got {actual})"
        super().__init__(message, 1005)
        self.expected = tuple(expected) if expected is not None else None
        self.actual = tuple(actual) if actual is not None else None


class TrainingDivergedError(EtsError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, iteration: int, components: Dict[str, float]) -> None:
        detail = ", ".join(f"{key}={value}" for key, value in components.items())
        super().__init__(f"Non-finite loss at iteration {iteration}: {detail}", 1006)
        self.iteration = iteration
        self.components = dict(components)


class CheckpointError(EtsError):
    """Raised when a checkpoint cannot be written or read."""

    def __init__(self, message: str, file_path: Optional[str] = None) -> None:
        super().__init__(message, 1007)
        self.file_path = file_path


class CheckpointCorruptError(CheckpointError):
    """Raised when a checkpoint is truncated or fails its checksum."""


class CheckpointVersionError(CheckpointError):
    """Raised when a checkpoint was written with an unsupported schema version."""

    def __init__(self, found: object, supported: int, file_path: Optional[str] = None):
        super().__init__(
            f"Unsupported checkpoint schema version {found!r} "
            f"(this build reads version {supported})",
            file_path,
        )
        self.found = found
        self.supported = supported


class ArchitectureMismatchError(CheckpointError):
    """Raised when a checkpoint belongs to a different encoder architecture."""

    def __init__(self, expected: str, actual: str, file_path: Optional[str] = None):
        super().__init__(
            f"Checkpoint architecture '{actual}' does not match expected '{expected}'",
            file_path,
        )
        self.expected = expected
        self.actual = actual


class MetricUndefinedError(EtsError):
    """Raised when an evaluation metric is undefined for its input."""

    def __init__(self, metric: str, reason: str) -> None:
        super().__init__(f"{metric} is undefined: {reason}", 1008)
        self.metric = metric
        self.reason = reason


class ConfigurationError(EtsError):
    """Raised when configuration issues occur."""

    def __init__(
        self,
        message: str,
        config_key: Optional[str] = None,
        invalid_keys: Optional[List[str]] = None,
    ) -> None:
        super().__init__(message, 1009)
        self.config_key = config_key
        self.invalid_keys = list(invalid_keys) if invalid_keys else []
