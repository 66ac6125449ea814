# hdafl/errors.py
"""
Exception hierarchy shared by every package.

Each class carries the process exit code the CLI maps it to:
0 success, 1 validation, 2 missing artifact, 3 numeric failure.
"""
from __future__ import annotations


class HDAFLError(Exception):
    exit_code = 1


class ConfigError(HDAFLError):
    """Bad configuration value or unknown configuration key."""


class ValidationError(HDAFLError):
    """A data invariant does not hold. The message names the invariant."""


class ShapeError(ValidationError, ValueError):
    """Tensor shapes disagree."""


class SamplingError(HDAFLError):
    """Episode sampling cannot satisfy its spec."""


class LoadError(HDAFLError):
    """A required file or artifact is missing or unreadable."""

    exit_code = 2


class NumericError(HDAFLError):
    """Non-finite values where finite ones are required."""

    exit_code = 3
