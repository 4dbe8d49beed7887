"""Exception types shared across the package."""


class VtsError(Exception):
    """Base class for all package errors."""


class DimensionError(VtsError):
    """Array shapes do not agree for an operation."""


class ConfigError(VtsError):
    """Invalid configuration value or combination."""


class DataError(VtsError):
    """Bad or inconsistent input data (corpora, sequences, durations)."""


class FormatError(VtsError):
    """Malformed binary or text file."""


class NondeterministicError(VtsError):
    """An objective expected to be deterministic returned differing values."""
