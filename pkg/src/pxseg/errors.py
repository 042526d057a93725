class PxsegError(Exception):
    """Base class for all library errors."""


class SizeError(PxsegError, ValueError):
    """Feature map or buffer dimensions do not fit a layer's geometry."""

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer!r}: {message}"
        super().__init__(message)


class SpecError(PxsegError, ValueError):
    """A network or solver description is malformed.

    ``errors`` holds ``(line_number, message)`` pairs; the line number is
    ``None`` for errors not tied to one line.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [(None, errors)]
        self.errors = [(None, e) if isinstance(e, str) else tuple(e) for e in errors]
        text = "; ".join(msg if line is None else f"line {line}: {msg}"
                         for line, msg in self.errors)
        super().__init__(text)


class ConversionError(PxsegError, ValueError):
    """A sliding-window network cannot be turned into a strided-kernel one."""


class NumericError(PxsegError, ArithmeticError):
    """Non-finite values appeared during training or inference."""
