"""Exception hierarchy shared across the package."""


class MIGError(Exception):
    """Base class for all package errors."""


# prompt library
class EmptyCrop(MIGError):
    pass


class OutOfBounds(MIGError):
    pass


class SplitViolation(MIGError):
    """A prompt would originate from a non-training split."""


class UnknownCategory(MIGError, KeyError):
    pass


class EmptyCategory(MIGError):
    pass


# embedding / serialization
class ProviderFailure(MIGError):
    pass


class MixedCategories(MIGError):
    pass


class BadMagic(MIGError):
    pass


class VersionMismatch(MIGError):
    pass


class TruncatedFile(MIGError):
    pass


class ChecksumMismatch(MIGError):
    pass


class ShapeMismatch(MIGError, ValueError):
    pass


class CorruptSection(MIGError):
    pass


# model
class StaleCache(MIGError):
    """Backward called with a cache whose parameters were modified since forward."""


class FixedNViolation(MIGError):
    pass


class WeightNotNormalized(MIGError, ValueError):
    pass


class DegenerateBox(MIGError, ValueError):
    pass


# training / config
class NonFiniteLoss(MIGError, FloatingPointError):
    pass


class ConfigError(MIGError):
    pass
