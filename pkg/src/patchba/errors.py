"""Exception types raised across the package."""


class PatchBAError(Exception):
    pass


class PointBehindCamera(PatchBAError):
    pass


# triangulation reports cheirality failures under its own name
BehindCamera = PointBehindCamera


class NonPositiveDepth(PatchBAError):
    pass


class OutOfExtent(PatchBAError):
    pass


class NoDataCell(PatchBAError):
    pass


class NoIntersection(PatchBAError):
    pass


class CornerMiss(PatchBAError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"image corner {index} ray does not hit the DSM")


class DegenerateFootprint(PatchBAError):
    pass


class GridDoesNotFit(PatchBAError):
    pass


class NoOverlap(PatchBAError):
    pass


class DegenerateBaseline(PatchBAError):
    pass


class NumericalFailure(PatchBAError):
    pass


class RegistrationFailure(PatchBAError):
    pass


class MissingPose(PatchBAError):
    pass


class AntipodalRotations(PatchBAError):
    pass


class NonPositiveParameter(PatchBAError, ValueError):
    pass


class NonPositiveVelocity(NonPositiveParameter):
    pass


class InvalidPlan(PatchBAError, ValueError):
    pass


class IdMismatch(PatchBAError):
    pass


class ConfigError(PatchBAError, ValueError):
    pass


class InsufficientImages(UserWarning):
    """Fewer images than one cluster; a single cluster is emitted."""


class WeakRegistration(UserWarning):
    """An image shares fewer tracks with its predecessor than registration needs."""
