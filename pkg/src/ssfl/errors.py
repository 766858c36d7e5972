"""Exception types raised across the pipeline."""


class SsflError(Exception):
    """Base class for all package errors."""


class ParseError(SsflError, ValueError):
    pass


class EmptyVolume(SsflError, ValueError):
    pass


class EmptyInput(SsflError, ValueError):
    pass


class BitDepthUnsupported(SsflError, ValueError):
    pass


class DimensionMismatch(SsflError, ValueError):
    pass


class NotGrayscale(SsflError, ValueError):
    pass


class IoError(SsflError, OSError):
    pass


class EmptySlice(SsflError, ValueError):
    pass


class BadKernel(SsflError, ValueError):
    pass


class MapMismatch(SsflError, ValueError):
    pass


class WindowOutOfRange(SsflError, IndexError):
    pass


class ShapeMismatch(SsflError, ValueError):
    pass


class LengthMismatch(SsflError, ValueError):
    pass


class NonFiniteActivation(SsflError, FloatingPointError):
    pass


class EmptyDataset(SsflError, ValueError):
    pass


class UnlabeledVolume(SsflError, ValueError):
    pass


class BadSpec(SsflError, ValueError):
    pass
