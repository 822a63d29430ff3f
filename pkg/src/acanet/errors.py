"""Exception types shared across the package."""


class AcanetError(Exception):
    pass


class ConfigError(AcanetError, ValueError):
    """Invalid model, training or run configuration."""


class ShapeError(AcanetError, ValueError):
    """Tensor or array has the wrong shape for the requested operation."""


class LoadError(AcanetError, OSError):
    """Weights or checkpoint file is missing, corrupt or incompatible."""


class EncodingError(AcanetError, ValueError):
    """Mask or label data contains values outside the class map."""


class EmptyObjectError(AcanetError, ValueError):
    pass


class TrainingError(AcanetError, RuntimeError):
    pass
