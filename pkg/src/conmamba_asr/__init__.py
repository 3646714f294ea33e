"""ConMamba-encoder / Mamba-decoder speech recognition at desk scale."""

__version__ = "0.1.0"


class ASRError(Exception):
    """Base class for errors raised by this package."""


class InputError(ASRError, ValueError):
    """Bad input data (too short, non-finite, wrong dimensions)."""


class ConfigError(ASRError, ValueError):
    """Invalid or unknown configuration."""


class DataError(ASRError, ValueError):
    """Malformed manifest or corpus data."""


class NumericError(ASRError, ArithmeticError):
    """A computation produced non-finite values."""
