"""Exception hierarchy shared across the package.

Every failure we raise on purpose derives from SegAdaptError so the CLI can
catch one type and print a single machine-parsable line.
"""


class SegAdaptError(Exception):
    """Base class for all deliberate failures."""


class ShapeError(SegAdaptError):
    """Operand dimensions violate an op contract."""


class ContractError(SegAdaptError):
    """A documented precondition was violated at runtime."""


class ConfigError(SegAdaptError):
    """Bad or unknown configuration input."""


class DataError(SegAdaptError):
    """Dataset files are missing, malformed, or inconsistent."""


class CheckpointError(SegAdaptError):
    """Checkpoint file is corrupt or from an incompatible version."""
