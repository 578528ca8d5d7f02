"""Exception hierarchy shared across the package."""


class FPConvError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(FPConvError, ValueError):
    pass


class LabelOutOfRange(FPConvError, ValueError):
    pass


class NonFiniteGradient(FPConvError, FloatingPointError):
    pass


class EmptyCloud(FPConvError, ValueError):
    pass


class TooManySamples(FPConvError, ValueError):
    pass


class TooFewSources(FPConvError, ValueError):
    pass


class AlreadyNormalized(FPConvError, ValueError):
    pass


class UnnormalizedWeights(FPConvError, ValueError):
    pass


class DivergedLoss(FPConvError, FloatingPointError):
    pass


class ConfigError(FPConvError, ValueError):
    pass


class ParseError(FPConvError, ValueError):
    """Malformed line in an ASCII cloud or manifest file."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")
