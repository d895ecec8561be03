"""
Error Types for the Cascaded Transducer Lab
-------------------------------------------
Every failure the library raises on purpose derives from TransducerLabError,
so callers can catch the whole family or a specific contract violation.
"""


class TransducerLabError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(TransducerLabError, ValueError):
    """An operation was called with arguments outside its contract."""


class NumericalError(TransducerLabError, ArithmeticError):
    """
    A computation produced a non-finite value.

    Attributes:
        index (tuple or None): Offending coordinate, when one is known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InfeasibleAlignmentError(UsageError):
    """No monotonic alignment exists for the requested lattice and labels."""


class ConfigurationError(TransducerLabError, ValueError):
    """A configuration is malformed or incompatible with another one."""


class CompressionInfeasibleError(TransducerLabError):
    """
    No architecture reaches the requested parameter budget.

    Attributes:
        target (int): Requested total parameter count.
        closest (dict): Closest achievable architecture and its total.
    """

    def __init__(self, message, target=None, closest=None):
        super().__init__(message)
        self.target = target
        self.closest = closest or {}


class TrainingDivergedError(TransducerLabError):
    """
    Training produced a non-finite loss.

    Attributes:
        step (int): Step at which the loss stopped being finite.
        last_metrics (dict or None): Last metric record with a finite loss.
    """

    def __init__(self, message, step, last_metrics=None):
        super().__init__(message)
        self.step = step
        self.last_metrics = last_metrics


class CheckpointError(TransducerLabError):
    """Base class for checkpoint container failures."""


class ChecksumMismatchError(CheckpointError):
    """Stored and recomputed checksums differ."""


class FormatVersionError(CheckpointError):
    """Container written with an unsupported format version or magic."""


class TruncatedCheckpointError(CheckpointError):
    """Container ended before all declared content was read."""


class CheckpointConfigMismatchError(CheckpointError, ConfigurationError):
    """Checkpoint contents do not fit the requested model configuration."""
