"""
swarm-markers - Error hierarchy
Every module raises from here; cli.py maps the classes to exit codes.
"""

from typing import Optional


class SwarmMarkersError(Exception):
    """Base error. Unexpected failures surface with exit code 1."""

    exit_code = 1


class ConfigurationError(SwarmMarkersError, ValueError):
    """Invalid scenario, constants, profile mixture or CLI parameter."""

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class WindowError(SwarmMarkersError, ValueError):
    """Window or segment too short for the requested computation."""

    exit_code = 3


class EstimatorError(WindowError):
    """Information-theoretic estimator cannot be evaluated on the series."""


class SchemaError(SwarmMarkersError, ValueError):
    """Marker matrices or datasets with incompatible columns."""

    exit_code = 3


class InsufficientDataError(SwarmMarkersError, ValueError):
    """Not enough windows, rows or classes for the analysis."""

    exit_code = 3


class DegenerateModelError(InsufficientDataError):
    """Training data contains a single class."""


class MissingArtifactError(SwarmMarkersError):
    """A pipeline stage needs an artifact that has not been produced."""

    exit_code = 4

    def __init__(self, artifact: str):
        self.artifact = artifact
        super().__init__(f"missing artifact: {artifact} (run with --regenerate)")
