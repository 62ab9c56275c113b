"""Exception types raised across the package."""


class WsiBlendError(Exception):
    """Base class for every error raised by wsiblend."""


# container
class InvalidDimensions(WsiBlendError, ValueError):
    pass


class OutOfBounds(WsiBlendError, ValueError):
    pass


class DimensionMismatch(WsiBlendError, ValueError):
    pass


class UnreadableFile(WsiBlendError, OSError):
    pass


class MissingSpacing(WsiBlendError, ValueError):
    pass


class IoFailure(WsiBlendError, OSError):
    pass


# annotations / geometry
class MalformedXml(WsiBlendError, ValueError):
    pass


class UnknownClass(WsiBlendError, ValueError):
    def __init__(self, name: str):
        super().__init__(f"unknown artifact class {name!r}")
        self.name = name


class UnsupportedGeometry(WsiBlendError, ValueError):
    pass


class DegeneratePolygon(WsiBlendError, ValueError):
    pass


class SingularTransform(WsiBlendError, ValueError):
    pass


# imgproc / blending
class NegativeSigma(WsiBlendError, ValueError):
    pass


class NonPositiveSigma(WsiBlendError, ValueError):
    pass


class DegenerateOutput(WsiBlendError, ValueError):
    pass


class EmptyMask(WsiBlendError, ValueError):
    pass


class MaskTouchesBorder(WsiBlendError, ValueError):
    pass


class SolverDivergedWarning(RuntimeWarning):
    """CG stopped at max_iters before reaching the requested tolerance."""


# extraction
class CorruptEntry(WsiBlendError, ValueError):
    pass


class EmptyClass(WsiBlendError, LookupError):
    pass


# segmentation
class EmptyRegion(WsiBlendError, ValueError):
    pass


class ExhaustedAttempts(WsiBlendError, RuntimeError):
    pass


# metrics
class SingleClassInput(WsiBlendError, ValueError):
    pass


class TooFewPairs(WsiBlendError, ValueError):
    pass


class AllZeroDifferences(WsiBlendError, ValueError):
    pass


class LengthMismatch(WsiBlendError, ValueError):
    pass


# configuration
class ConfigError(WsiBlendError, ValueError):
    pass


class MalformedTable(WsiBlendError, ValueError):
    """Prediction table that does not follow the documented columns."""
