"""Exception hierarchy shared by every tmsp module."""


class TMSPError(Exception):
    """Base class for all package errors."""


class DimensionError(TMSPError, ValueError):
    """Operand shapes are incompatible."""


class ArgumentError(TMSPError, ValueError):
    """An argument is outside its valid domain."""


class DataError(TMSPError, ValueError):
    """Input data violates an invariant (NaN, empty text, bad label...)."""


class FormatError(TMSPError, ValueError):
    """A binary or text file does not match its declared format."""


class ConfigError(TMSPError, ValueError):
    """A configuration is invalid or incompatible."""


class EpisodeLookupError(TMSPError, KeyError):
    """A requested id is not present."""

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class GenerationError(TMSPError, RuntimeError):
    """The synthetic world could not produce a valid sample."""


class DivergenceError(TMSPError, RuntimeError):
    """Training produced a non-finite loss."""
