"""Exception types shared across the package."""


class SplitexitError(Exception):
    """Base class for all package-specific errors."""

    category = "error"


class GraphError(SplitexitError):
    """Graph file failed to parse or violates a structural invariant."""

    category = "graph"


class TraceError(SplitexitError):
    """Exit trace or platform profile file is malformed."""

    category = "trace"


class ColdEstimatorError(SplitexitError):
    """No bandwidth/latency estimate is available for the current network type."""

    category = "cold-estimator"


class InfeasibleError(SplitexitError):
    """The candidate configuration space is empty."""

    category = "infeasible"


class FrameError(SplitexitError):
    """A wire or packed frame failed integrity checks."""

    category = "frame"


class ScenarioError(SplitexitError):
    """Scenario file references unknown inputs or is malformed."""

    category = "scenario"
