"""Exception types shared across the package."""


class TubeNmpcError(Exception):
    """Base class for package-specific errors."""


class AllFlowsZero(TubeNmpcError):
    """Inlet mixing is undefined when every feed flow is zero."""


class NonFiniteState(TubeNmpcError):
    """NaN/Inf encountered while evaluating or integrating the dynamics."""


class InconsistentBounds(TubeNmpcError):
    """A lower bound exceeds the matching upper bound."""


class SolverFailure(TubeNmpcError):
    """The NLP solver did not return a usable point."""


class ConfigError(TubeNmpcError):
    """A scenario or parameter file is missing entries or holds bad values."""
