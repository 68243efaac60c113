"""Exception hierarchy shared by every module."""


class UnimatchError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(UnimatchError):
    exit_code = 2


class DataError(UnimatchError):
    exit_code = 3


class ParseError(DataError):
    """Malformed mesh, ground-truth or cache file."""


class TopologyError(DataError):
    """Out-of-range face index, repeated vertex in a face, unreferenced vertex."""


class DisconnectedError(DataError):
    """Some vertex is unreachable from the geodesic source."""


class DimensionError(DataError):
    """Array shapes do not agree."""


class NumericalError(UnimatchError):
    exit_code = 4


class DegenerateError(NumericalError):
    """Zero-area geometry where a positive measure is required."""


class ConvergenceError(NumericalError):
    """The eigensolver missed its residual target."""


class SingularError(NumericalError):
    """Unregularized functional-map system is singular."""


class NonFiniteGradientError(NumericalError):
    """A NaN or Inf showed up in a gradient during training."""


class CycleConsistencyError(NumericalError):
    """Pairwise maps composed through the universe disagree on some triplet."""
