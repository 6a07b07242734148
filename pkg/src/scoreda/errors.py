"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ScoreDAError(Exception):
    """Base class for all package errors."""


class DomainError(ScoreDAError, ValueError):
    """A time or parameter argument lies outside its admissible range."""


class InputError(ScoreDAError, ValueError):
    """Malformed input: wrong dimension, non-finite values, empty batch."""


class ConfigError(ScoreDAError, ValueError):
    """Invalid configuration. ``issues`` holds ``field: message`` strings."""

    def __init__(self, message: str, issues: list[str] | None = None):
        self.issues = list(issues or [])
        if self.issues:
            message = message + "\n" + "\n".join(f"  - {i}" for i in self.issues)
        super().__init__(message)


class NumericGuardError(ScoreDAError, ArithmeticError):
    """A schedule coefficient dropped below its numeric floor."""


class NumericError(ScoreDAError, ArithmeticError):
    """A computation produced non-finite values."""


class TrainingError(ScoreDAError, RuntimeError):
    """Optimisation diverged."""

    def __init__(self, message: str, epoch: int):
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")


class IntegrationError(ScoreDAError, RuntimeError):
    """A dynamical-system integration blew up."""


class DescriptorMismatch(ScoreDAError, ValueError):
    """A persisted artifact does not match the expected descriptor."""


class ArtifactMissingError(ScoreDAError, FileNotFoundError):
    """An upstream artifact is absent; the message names the producing command."""
