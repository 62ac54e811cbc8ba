"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes (see ``cotmeta.cli``).
"""

from __future__ import annotations


class CotMetaError(Exception):
    """Base class for all package errors."""


class ConfigError(CotMetaError, ValueError):
    """Invalid configuration value or precondition on a hyperparameter."""


class DimensionError(CotMetaError, ValueError):
    """Shape mismatch between arrays."""


class ContractError(CotMetaError, ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(CotMetaError, ArithmeticError):
    """A NaN or infinity appeared in a computation."""


class DataError(CotMetaError, ValueError):
    """Dataset content does not support the request (too few samples, split overlap)."""


class UnknownWordError(CotMetaError, KeyError):
    """Lookup of a word or category that is not part of the closed vocabulary."""


class CapacityError(CotMetaError, ValueError):
    """Sequence longer than the model's context window."""


class DependencyError(CotMetaError):
    """An upstream artifact required by a command is missing."""


class StaleArtifactError(DependencyError):
    """An artifact on disk no longer matches the hash recorded in the manifest."""
