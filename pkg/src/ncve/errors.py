"""Shared exception types with their CLI exit-code categories.

Every failure the library can raise on purpose falls into one of four
categories; the CLI maps each to a fixed exit code so callers can script
against failures without parsing messages.
"""

from __future__ import annotations


class NcveError(Exception):
    """Base class for all errors raised deliberately by this package."""

    exit_code = 1


class SchemaError(NcveError):
    """Malformed input: missing columns, unparseable cells, bad config keys."""

    exit_code = 2


class ConfigError(SchemaError):
    """Invalid configuration values (e.g. induced probabilities outside [0,1])."""


class IdentifiabilityError(NcveError):
    """A required system has no unique solution (singular or under-identified)."""

    exit_code = 3


class ConvergenceError(NcveError):
    """An iterative solver failed to converge.

    Carries the residual-norm trajectory so callers can inspect how the
    iteration stalled.
    """

    exit_code = 4

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = list(trajectory) if trajectory is not None else []


class DegenerateDataError(NcveError):
    """Data that makes the requested estimate meaningless (empty arms, no cases)."""

    exit_code = 5
