"""Exception types raised across the package."""


class MultiSLEError(Exception):
    """Base class for all package errors."""


class InvalidParams(MultiSLEError, ValueError):
    pass


class GapCollapse(MultiSLEError):
    """A driver path could not keep its particles apart at the minimum sub-step."""

    def __init__(self, message, path_id=None, time=None):
        super().__init__(message)
        self.path_id = path_id
        self.time = time


class DegenerateInput(MultiSLEError, ValueError):
    pass


class InsideHull(MultiSLEError):
    pass


class AtFoot(MultiSLEError):
    pass


class SelfTouchUnresolved(MultiSLEError):
    pass


class WalkerLeak(MultiSLEError):
    pass


class ReverseBlowup(MultiSLEError):
    pass


class CurveExhausted(MultiSLEError):
    pass


class TouchDegenerate(MultiSLEError):
    pass


class DerivativeBlowup(MultiSLEError):
    pass


class MeshTooLarge(MultiSLEError):
    pass


class OnBoundary(MultiSLEError, ValueError):
    pass


class ResolutionTooCoarse(MultiSLEError, ValueError):
    pass


class ConfigInvalid(MultiSLEError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class MalformedInput(MultiSLEError, ValueError):
    pass


class IoFailure(MultiSLEError, OSError):
    """Reading or writing a run artifact failed."""
