"""Exception types shared by the quantization library and its command line."""


class GsqError(Exception):
    """Base class for every error raised by this project."""


class FormatError(GsqError, ValueError):
    """Invalid format descriptor, non-finite input or unrepresentable value."""


class CorruptDataError(GsqError, ValueError):
    """Stored codes or headers that cannot have been produced by an encoder."""


class TensorFileError(GsqError, ValueError):
    """A tensor file could not be parsed.

    Args:
        message: What went wrong
        offset: Byte offset at which parsing failed
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ShapeError(GsqError, ValueError):
    """Operand shapes do not line up."""


class ConfigError(GsqError, ValueError):
    """Unknown or invalid configuration keys or values."""


class ForwardNotCalledError(GsqError, RuntimeError):
    """Backward was requested on a layer with no cached activation."""

    def __init__(self, layer_name):
        super().__init__(f"forward not called on layer '{layer_name}'")
        self.layer_name = layer_name


class DivergenceError(GsqError, RuntimeError):
    """Training produced a non-finite or exploding loss."""

    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss
