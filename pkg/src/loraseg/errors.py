"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 3, everything else
raised from this hierarchy -> 1.
"""


class LorasegError(Exception):
    pass


class ConfigError(LorasegError):
    """Invalid configuration file, field value, or override path."""


class ShapeError(LorasegError):
    """Tensor shape or value-domain mismatch at an operation boundary."""


class DataError(LorasegError):
    """Broken dataset layout, unreadable file, or empty split."""


class InjectionError(LorasegError):
    """Illegal adapter injection (double-inject, unfrozen host, bad rank)."""


class CheckpointError(LorasegError):
    """Unreadable archive, missing/unknown tensors, or digest mismatch."""


class TrainingDiverged(LorasegError):
    """Loss became non-finite; diagnostic state was dumped before raising."""
