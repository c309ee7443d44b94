"""Exception types raised across the package."""


class EvChargeError(Exception):
    """Base class for every error raised by evcharge."""


class EmptyDataset(EvChargeError, ValueError):
    pass


class SingularCovariance(EvChargeError, ArithmeticError):
    """A mixture component collapsed below the covariance floor."""


class InvalidRecord(EvChargeError, ValueError):
    pass


class DurationExceedsHorizon(EvChargeError, ValueError):
    pass


class BadX(EvChargeError, ValueError):
    pass


class MixedResolution(EvChargeError, ValueError):
    pass


class BadDuration(EvChargeError, ValueError):
    pass


class DimensionMismatch(EvChargeError, ValueError):
    pass


class NotSymmetric(EvChargeError, ValueError):
    pass


class NumericalBreakdown(EvChargeError, ArithmeticError):
    pass


class SolverFailure(EvChargeError, RuntimeError):
    pass


class InfeasibleDemand(EvChargeError, ValueError):
    pass


class DegenerateDistribution(EvChargeError, ValueError):
    pass


class ParseError(EvChargeError, ValueError):
    """Malformed input file; ``line`` is the 1-based line number."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line
