"""Exception types raised by the engine."""


class ShapeError(ValueError):
    """Input or parameter shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in an activation or gradient."""


class TrainingDivergedError(RuntimeError):
    """Training loss became NaN or infinite."""


class ModelFormatError(ValueError):
    """Base class for weight-file decoding errors."""


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass
