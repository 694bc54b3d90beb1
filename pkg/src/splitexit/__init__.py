"""Split-point and early-exit co-scheduling for distributed CNN inference."""

from .graph import (
    ExitPoint,
    Layer,
    LayerGraph,
    SplitPoint,
    enumerate_splits,
    load_graph,
    place_exits,
)
from .profiles import (
    ExitProfile,
    PlatformProfile,
    SampleTrace,
    exit_cdf,
    exit_of_sample,
    expected_accuracy,
    softmax,
)
from .scheduler import (
    Configuration,
    HardConstraint,
    MetricVector,
    SlaSpec,
    SoftTarget,
    estimate_metrics,
    filter_feasible,
    lexicographic_select,
    schedule,
)

__version__ = "0.1.0"

__all__ = [
    "Configuration",
    "ExitPoint",
    "ExitProfile",
    "HardConstraint",
    "Layer",
    "LayerGraph",
    "MetricVector",
    "PlatformProfile",
    "SampleTrace",
    "SlaSpec",
    "SoftTarget",
    "SplitPoint",
    "enumerate_splits",
    "estimate_metrics",
    "exit_cdf",
    "exit_of_sample",
    "expected_accuracy",
    "filter_feasible",
    "lexicographic_select",
    "load_graph",
    "place_exits",
    "schedule",
    "softmax",
]
