"""Exception hierarchy shared by every refqsr module."""


class RefQSRError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RefQSRError, ValueError):
    pass


class InvalidGeometryError(RefQSRError, ValueError):
    pass


class InvalidPolicyError(RefQSRError, ValueError):
    pass


class PlanViolationError(RefQSRError):
    pass


class ZeroNormError(RefQSRError, ValueError):
    pass


class WeightLoadError(RefQSRError):
    pass


class ImageFormatError(RefQSRError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class SamplingError(RefQSRError):
    pass


class PatchError(RefQSRError):
    """A per-patch forward pass failed; ``index`` names the patch."""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"patch {index} failed: {cause}")
        self.index = index
        self.cause = cause
