"""Exception hierarchy shared by every module."""


class PosefreeError(Exception):
    """Base class for all errors raised by the package."""


class DegenerateInput(PosefreeError, ValueError):
    pass


class BehindCamera(PosefreeError, ValueError):
    pass


class DimensionMismatch(PosefreeError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class ChannelMismatch(DimensionMismatch):
    pass


class ResolutionMismatch(DimensionMismatch):
    pass


class BadDimensions(PosefreeError, ValueError):
    pass


class BadRange(PosefreeError, ValueError):
    pass


class EmptyInput(PosefreeError, ValueError):
    pass


class AllOccluded(PosefreeError, ValueError):
    pass


class EmptyView(PosefreeError, ValueError):
    pass


class ZeroOverlap(PosefreeError, ValueError):
    pass


class DegenerateRatio(PosefreeError, ValueError):
    pass


class TooShort(PosefreeError, ValueError):
    pass


class CorruptWeights(PosefreeError, ValueError):
    """Weight blob failed its header or checksum validation."""


class SceneFormatError(PosefreeError, ValueError):
    """A scene directory is missing files or has malformed camera lines."""
