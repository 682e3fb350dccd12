"""Exception hierarchy shared by every layer of the workbench."""

from typing import Any, Optional


class EaaSError(Exception):
    """Base class for all workbench errors."""

    kind = "error"


class ConfigurationError(EaaSError):
    """Unknown name, invalid value or malformed config file."""

    kind = "configuration"


class PreconditionError(EaaSError):
    """An operation was called with inputs that violate its contract."""

    kind = "precondition"


class DatasetLoadError(EaaSError):
    """Dataset files are missing or unreadable."""

    kind = "dataset_load"


class CheckpointError(EaaSError):
    """Checkpoint is corrupted, truncated or inconsistent with its metadata."""

    kind = "checkpoint"


class AuthError(EaaSError):
    """Unknown account token."""

    kind = "auth"


class QuotaError(EaaSError):
    """Query would exceed the account's budget cap."""

    kind = "quota"


class DomainError(EaaSError):
    """Value outside the mathematical domain of an operation."""

    kind = "domain"


class InvariantViolation(EaaSError):
    """Internal state broke one of its invariants."""

    kind = "invariant"


class TrainingDivergedError(EaaSError):
    """Loss became NaN or infinite."""

    kind = "diverged"


class AttackAborted(EaaSError):
    """A steal run stopped early; partial artifacts are attached."""

    kind = "attack_aborted"

    def __init__(self, message: str, partial: Optional[Any] = None):
        super().__init__(message)
        self.partial = partial


class PipelineError(EaaSError):
    """A pipeline stage failed."""

    kind = "pipeline"

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
