class OzoneBiasError(Exception):
    """Base class of all errors raised by ozone_bias."""


class UsageError(OzoneBiasError):
    """Invalid command line usage (unknown subcommand, bad flag value, ...)."""


class DataError(OzoneBiasError, ValueError):
    """Base class for errors caused by invalid or inconsistent input data."""


class InvalidGridSpec(DataError):
    pass


class OutOfDomain(DataError):
    pass


class EmptyInput(DataError):
    pass


class ChannelMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class EmptyCell(DataError):
    pass


class InvalidRaster(DataError):
    pass


class DateMismatch(DataError):
    pass


class ChannelCountMismatch(DataError):
    pass


class EmptyEval(DataError):
    pass


class EmptyDataset(DataError):
    pass


class OddSpatialDims(DataError):
    pass


class AllMasked(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class NoValidPairs(DataError):
    pass


class MismatchedEvalSets(DataError):
    pass


class FormatError(DataError):
    """A file does not follow the expected on-disk format."""


class IoError(OzoneBiasError, OSError):
    """Writing or reading an artifact failed at the operating system level."""
