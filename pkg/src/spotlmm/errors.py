"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: input/configuration problems exit
with 2, numerical failures with 3.
"""


class SpotLmmError(Exception):
    """Base class for all package errors."""


class DataError(SpotLmmError):
    """Malformed or insufficient input data (bad CSV, empty asset, ...)."""


class ConfigError(SpotLmmError):
    """Invalid tuning parameters or an inconsistent run configuration."""


class NumericalError(SpotLmmError):
    """A linear-algebra step failed beyond what regularization can fix."""
