"""Exception hierarchy shared across the codec."""


class CodecError(Exception):
    """Base class for every error raised by saecodec."""


class InvalidArgumentError(CodecError, ValueError):
    pass


class PreconditionError(CodecError, ValueError):
    pass


class TrainingDivergenceError(CodecError, FloatingPointError):
    """Raised when a loss or gradient turns non-finite."""

    def __init__(self, message, name=None, iteration=None):
        super().__init__(message)
        self.name = name
        self.iteration = iteration


class ModelError(CodecError):
    pass


class WrongModelError(ModelError):
    pass


class CodingError(CodecError, ValueError):
    pass


class DecodeError(CodecError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class MetricError(CodecError, ValueError):
    pass


class UnsupportedError(CodecError):
    pass


class ImageIOError(CodecError):
    """An image file could not be read or written."""
