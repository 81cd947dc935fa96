"""Exception types raised across the package."""


class SemiFSSError(Exception):
    """Base class for every error raised by semifss."""


# dataset
class MissingMask(SemiFSSError):
    def __init__(self, class_name, stem):
        super().__init__(f"image {class_name}/{stem} has no mask file")
        self.class_name = class_name
        self.stem = stem


class EmptyClass(SemiFSSError):
    pass


class CorruptImage(SemiFSSError):
    pass


class UnsupportedClassCount(SemiFSSError):
    pass


class DegenerateSplit(SemiFSSError):
    pass


# episodes / surrogate
class InsufficientEntries(SemiFSSError):
    pass


class EmptyUnlabeledPool(SemiFSSError):
    pass


class NegativeSigma(SemiFSSError, ValueError):
    pass


# network
class IndivisibleInput(SemiFSSError, ValueError):
    pass


class EmptyMask(SemiFSSError):
    """Foreground vanished (support mask has no pixels at feature resolution)."""


class EmptyAfterDownsample(EmptyMask):
    pass


class MixedClasses(SemiFSSError, ValueError):
    pass


class DimensionMismatch(SemiFSSError, ValueError):
    pass


class CorruptCheckpoint(SemiFSSError):
    pass


class ShapeMismatch(SemiFSSError, ValueError):
    pass


# objectives / evaluation
class NegativeLambda(SemiFSSError, ValueError):
    pass


class RangeViolation(SemiFSSError, ValueError):
    pass


class NonBinaryInput(SemiFSSError, ValueError):
    pass


# trainer / config
class ExhaustedResampling(SemiFSSError):
    pass


class ConfigError(SemiFSSError, ValueError):
    """Invalid configuration value. ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
