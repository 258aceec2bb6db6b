"""Exception types shared across the package.

Everything derives from SplitbackError so callers can catch broadly; the
subclasses mirror the distinct failure modes of the pipeline (bad input
files, malformed partitions, graph problems, numeric blowups, ...).
"""


class SplitbackError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(SplitbackError):
    """Input file does not match the expected binary or text format."""


class AlignmentError(SplitbackError):
    """Paired inputs disagree on sample counts or shapes."""


class SchemeError(SplitbackError):
    """Feature partition rectangles overlap, leave gaps, or exceed bounds."""


class ConfigError(SplitbackError):
    """Invalid configuration value or combination."""


class ContractError(SplitbackError):
    """Caller violated a shape or state contract of a model/graph API."""


class DomainError(SplitbackError):
    """Numeric argument outside the mathematical domain (e.g. sigma <= 0)."""


class NumericError(SplitbackError):
    """Non-finite values encountered where finite math was required."""


class ScarcityError(SplitbackError):
    """Not enough samples available to satisfy a sampling request."""


class DegenerateDataError(SplitbackError):
    """Training data collapsed to a single class where two are required."""


class ConnectivityError(SplitbackError):
    """Adversary graph is disconnected or a node is unreachable."""


class PlacementError(SplitbackError):
    """Trigger rectangle intersects feature space owned by benign clients."""


class GeometryError(SplitbackError):
    """Trigger share cannot be shaped or placed inside the owner's slice."""


class EstimationError(SplitbackError):
    """Instrumentation contains too few samples to estimate a quantity."""


class PreconditionError(SplitbackError):
    """A stated theorem precondition does not hold for the given run."""


class PhaseError(SplitbackError):
    """A run failed inside a named phase; .phase tags where."""

    def __init__(self, phase: str, message: str):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase
