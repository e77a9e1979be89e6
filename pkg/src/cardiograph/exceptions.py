"""Exception hierarchy.

Every error raised by the package derives from :class:`CardiographError`.
The three intermediate classes map onto CLI exit codes (config = 2,
numerical = 3, I/O = 4).
"""


class CardiographError(Exception):
    """Base class for all package errors."""


class ConfigError(CardiographError, ValueError):
    exit_code = 2


class NumericalError(CardiographError, ArithmeticError):
    exit_code = 3


class FormatError(CardiographError, IOError):
    exit_code = 4


# geometry
class InvalidDims(ConfigError):
    pass


class Unsupported(ConfigError):
    pass


class NegativeSigma(ConfigError):
    pass


# monodomain / eikonal
class LinearSolveDiverged(NumericalError):
    pass


class NoActivation(NumericalError):
    def __init__(self, message, sample_index=None):
        if sample_index is not None:
            message = f"sample {sample_index}: {message}"
        super().__init__(message)
        self.sample_index = sample_index


class NotConverged(NumericalError):
    pass


class NonPositiveVelocity(ConfigError):
    pass


# dataset / container
class EmptyMask(ConfigError):
    pass


class TooSmall(ConfigError):
    pass


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class ChecksumMismatch(FormatError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (record at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


# surrogates
class NotSPD(NumericalError):
    pass


class GeometryMismatch(ConfigError):
    pass


class ModeOverflow(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    pass


class ZeroTarget(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, epoch, what="loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}")
        self.epoch = epoch


# evaluation
class ZeroTruthRow(NumericalError):
    pass


class ConstantVector(NumericalError):
    pass


class EmptyList(ConfigError):
    pass
