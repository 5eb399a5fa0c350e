"""Exception types raised across the lab."""


class GleeError(Exception):
    pass


class DimensionError(GleeError, ValueError):
    """Operand shapes are incompatible."""


class ShapeError(DimensionError):
    """A stored parameter block does not fit the requested model."""


class StateError(GleeError, RuntimeError):
    """An operation was invoked in the wrong order (e.g. backward before forward)."""


class ConfigurationError(GleeError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class TemplateError(GleeError, ValueError):
    pass


class VerbalizerError(GleeError, ValueError):
    pass


class InputStructureError(GleeError, ValueError):
    """The head needs a [MASK] representation the input does not provide."""


class EmptyInputError(GleeError, ValueError):
    pass


class DegenerateError(GleeError, ValueError):
    pass


class FormatError(GleeError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDivergedError(GleeError, RuntimeError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
