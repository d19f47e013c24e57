"""Exception hierarchy shared by all modules."""


class GrrnError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(GrrnError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(GrrnError):
    """Invalid hyperparameter combination or config file content."""


class DataError(GrrnError):
    """Missing, corrupt, or out-of-contract input data."""


class CheckpointError(GrrnError):
    """Malformed checkpoint file; message carries the byte offset."""


class NumericError(GrrnError):
    """Non-finite values encountered during training."""
