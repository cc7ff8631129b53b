"""Exception hierarchy shared by every stage of the pipeline."""
from __future__ import annotations

from typing import Optional

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_TRAINING = 2
EXIT_IO = 3


class BupError(Exception):
    """Base class for all pipeline errors."""


class InputError(BupError, ValueError):
    """Raised when caller-supplied data or arguments are unusable."""


class ConfigError(InputError):
    """Raised when the experiment config document fails validation."""


class CheckpointError(InputError):
    """Raised when a checkpoint does not match the dataset it is applied to."""


class DatasetParseError(InputError):
    def __init__(self, path: str, line_number: int, message: str) -> None:
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = path
        self.line_number = line_number


class InvariantViolation(BupError, RuntimeError):
    """Raised when a numerical invariant fails; always signals an upstream bug."""


class TrainingError(BupError, RuntimeError):
    def __init__(self, message: str, *, epoch: Optional[int] = None, weight: Optional[str] = None) -> None:
        parts = [message]
        if epoch is not None:
            parts.append(f"epoch={epoch}")
        if weight is not None:
            parts.append(f"weight={weight}")
        super().__init__(" ".join(parts))
        self.epoch = epoch
        self.weight = weight


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, InputError):
        return EXIT_INPUT
    if isinstance(exc, (TrainingError, InvariantViolation)):
        return EXIT_TRAINING
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_TRAINING
