"""Exception taxonomy shared by all idfcr modules.

Every error the CLI can surface maps to one of these classes so the
harness can emit a machine-readable error line and a stable exit code.
"""


class IdfcrError(Exception):
    """Base class for all idfcr errors."""

    exit_code = 1


class ConfigError(IdfcrError):
    """Invalid configuration: bad dimensions, non-divisible sizes, bad ranges."""

    exit_code = 2


class ParameterError(IdfcrError):
    """A runtime argument is outside its documented range."""

    exit_code = 2


class DataError(IdfcrError):
    """Malformed or inconsistent data: shape mismatches, undecodable images."""

    exit_code = 3


class ListingError(DataError):
    """Paired directory listing is inconsistent (orphan or missing files)."""

    exit_code = 3


class DependencyError(IdfcrError):
    """A training phase was invoked before its prerequisite checkpoints exist."""

    exit_code = 4


class CheckpointError(IdfcrError):
    """Checkpoint file is unreadable, version-incompatible, or shape-incompatible."""

    exit_code = 5
