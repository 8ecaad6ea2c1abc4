"""Exception types shared across the simulator."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ParameterError(ValueError):
    """A scalar argument is outside its legal range or an enum is unknown."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf (training divergence)."""


class ProtocolError(RuntimeError):
    """Client/server exchange violated the round protocol."""


class InfeasibleError(ValueError):
    """The requested operation cannot be satisfied by the given inputs."""


class PartitionError(RuntimeError):
    """Data partitioning failed repeatedly (e.g. every client thresholded out)."""


class ConfigError(ValueError):
    """An experiment configuration failed validation."""
