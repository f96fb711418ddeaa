"""Exception hierarchy for gridfee.

Every error raised on bad input derives from :class:`GridFeeError`, itself a
``ValueError``, so callers can catch broadly or narrowly.
"""


class GridFeeError(ValueError):
    """Base class for all gridfee input and computation errors."""


# time series
class MissingColumn(GridFeeError):
    pass


class IrregularGrid(GridFeeError):
    """Gap, duplicate or non-uniform timestamps within one customer's series."""


class NonFiniteValue(GridFeeError):
    pass


class GridMismatch(GridFeeError):
    """Series that must share a TimeGrid do not."""


class EmptyFleet(GridFeeError):
    pass


class EmptySeries(GridFeeError):
    pass


class EmptyGroup(GridFeeError):
    pass


class NonMultipleInterval(GridFeeError):
    pass


class LengthMismatch(GridFeeError):
    pass


# peak indicator
class NegativeK(GridFeeError):
    pass


# impacts / billing
class DegenerateTotal(GridFeeError):
    """A fleet total used as a share denominator is (numerically) zero."""


class DegenerateShares(DegenerateTotal):
    pass


class CustomerSetMismatch(GridFeeError):
    pass


# scenarios / synthetic data
class OverlaySignViolation(GridFeeError):
    pass


class WindowOverlap(GridFeeError):
    pass


class InvalidFractions(GridFeeError):
    pass


class OverlappingGroups(GridFeeError):
    pass


class UnknownHome(GridFeeError):
    pass


# configuration
class ConfigError(GridFeeError):
    pass


class SpecError(GridFeeError):
    """A scenario spec file failed validation."""
