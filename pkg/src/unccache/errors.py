"""Exception types raised across the package."""


class UncCacheError(Exception):
    """Base class for all package errors."""


class DegenerateInput(UncCacheError, ValueError):
    pass


class NotSymmetric(UncCacheError, ValueError):
    pass


class NotPSD(UncCacheError, ValueError):
    pass


class InvalidAlpha(UncCacheError, ValueError):
    pass


class FlatSpectrum(UncCacheError, ValueError):
    pass


class BadK(UncCacheError, ValueError):
    pass


class ZeroVariance(UncCacheError, ValueError):
    pass


class EmptyCalibration(UncCacheError, ValueError):
    pass


class BadRange(UncCacheError, ValueError):
    pass


class BadM(UncCacheError, ValueError):
    pass


class WindowUnderflow(UncCacheError, ValueError):
    pass


class FingerprintMismatch(UncCacheError):
    pass


class SchemaError(UncCacheError, ValueError):
    """File is not in a recognised schema or version."""


class ContextOverflow(UncCacheError, ValueError):
    pass


class PlanMismatch(UncCacheError, ValueError):
    pass


class BadRatio(UncCacheError, ValueError):
    pass
