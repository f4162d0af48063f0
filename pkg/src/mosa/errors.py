"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes: ConfigError -> 2, DataError and
its subclasses -> 3, NumericError -> 4, any other MosaError -> 5.
"""


class MosaError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MosaError):
    """Invalid configuration: bad key, bad value, violated constraint."""


class ShapeError(MosaError):
    """Tensor dimension mismatch; the message names the offending shapes."""


class IndexRangeError(MosaError):
    """Expert index, label, or mask index outside its valid range."""


class NumericError(MosaError):
    """Non-finite values or invalid numeric domains; names the operation."""


class DataError(MosaError):
    """Dataset or file-level problem."""


class FormatError(DataError):
    """Bad magic bytes or malformed record layout."""


class VersionError(DataError):
    """File declares a format version this reader does not support."""


class CorruptionError(DataError):
    """Checksum mismatch: the file content does not match its CRC."""


class TruncatedFileError(DataError):
    """File ends before the layout declared in its header."""


class InternalError(MosaError):
    """A structural invariant the library maintains was found broken."""
