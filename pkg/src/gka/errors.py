"""Exception taxonomy shared across the engine."""


class GkaError(Exception):
    """Base class for all engine errors."""


class ShapeError(GkaError):
    """Operand shapes are inconsistent."""


class ParameterError(GkaError):
    """A scalar/config parameter is out of its valid range."""


class DegenerateRowError(GkaError):
    """A mask left some row with zero allowed entries."""


class NumericError(GkaError):
    """NaN/Inf encountered where finite values are required."""


class InputError(GkaError):
    """Invalid runtime input (e.g. token id out of vocabulary)."""


class ConfigError(GkaError):
    """Invalid model/CLI configuration."""
