"""Exception types shared across the package."""

from __future__ import annotations


class RobustSciError(Exception):
    pass


class DomainError(RobustSciError, ValueError):
    """A function was evaluated outside its mathematical domain."""


class NumericalError(RobustSciError, ArithmeticError):
    """Non-finite values, non-convergence and similar numerical failures."""

    def __init__(self, message: str, index=None, location=None):
        super().__init__(message)
        self.index = index
        self.location = location


class UsageError(RobustSciError, RuntimeError):
    """An API was called in an invalid state."""


class TrainingError(NumericalError):
    """Training diverged; ``diagnostics`` carries the recent loss history."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class AttackError(NumericalError):
    pass


class ConfigError(RobustSciError, ValueError):
    """Invalid experiment configuration; ``problems`` lists every violation."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  - " + "\n  - ".join(problems))
        self.problems = list(problems)


class DataError(RobustSciError, ValueError):
    """Malformed input data (e.g. an equation-of-state CSV)."""
