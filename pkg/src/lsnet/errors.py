"""Exception hierarchy shared by all lsnet modules.

The CLI maps these to exit code 1; command-line usage problems exit 2.
"""


class LsnetError(Exception):
    """Base class for all errors raised by lsnet."""


class ShapeError(LsnetError):
    """Tensor/volume dimension mismatch; message names both shapes."""


class UsageError(LsnetError):
    """API misuse: missing cache, out-of-range index, wrong volume kind."""


class DataError(LsnetError):
    """Input data violates a precondition (bad label, empty mask, ...)."""


class ConfigError(LsnetError):
    """Invalid configuration value or network spec."""


class FormatError(LsnetError):
    """Malformed file. ``offset`` is the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(LsnetError):
    """Optimization failure: divergence or non-finite gradients."""


class PipelineError(LsnetError):
    """Cascade stage failure; message carries the stage name."""

    def __init__(self, message, stage=None):
        if stage is not None:
            message = f"[{stage}] {message}"
        super().__init__(message)
        self.stage = stage
