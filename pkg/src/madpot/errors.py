"""Exception hierarchy shared by all madpot modules."""


class MadpotError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(MadpotError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(InvalidInputError):
    """Array dimensions do not agree."""


class InvalidConfigError(InvalidInputError):
    """A configuration field is out of its allowed range."""


class InfeasibleError(MadpotError):
    """Transport marginals admit no feasible plan."""


class NumericalDegeneracyError(MadpotError):
    """The Gibbs kernel underflowed; try a larger entropic weight."""


class UndefinedMetricError(MadpotError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""


class ParseError(MadpotError, ValueError):
    """A file could not be parsed."""


class TrainingError(MadpotError):
    """Raised when a training step cannot be completed."""
