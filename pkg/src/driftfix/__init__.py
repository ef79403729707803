"""driftfix: error-driven online model refinement on drifting synthetic streams.

The package simulates a deployed classifier that is continually patched from
its own prediction errors: clusters of shifted Gaussian-mixture data feed a
non-stationary query stream, a small differentiable model is refined online
by one of several strategies (fine-tuning, parameter anchors, replay), and
every run is scored with per-step retention/generalization metrics.
"""

from .clusters import (
    ClusterSet,
    ClusterShift,
    Example,
    GeneratorSpec,
    default_generator_spec,
    generate_clusters,
    load_clusters,
    save_clusters,
)
from .harness import (
    LearnerConfig,
    RunConfig,
    RunResult,
    default_dynamics_variants,
    default_grids,
    dynamics_grid,
    execute_run,
    run_episode_loop,
    run_reference_frozen,
    run_reference_offline,
    sweep,
    write_run,
)
from .learner import Arch, LearnerState, fine_tune, predict, train_upstream
from .memory import BiMemory, ReplaySelection, memory_write, select_conditional, select_random
from .metrics import AggregateReport, MetricsConfig, MetricTrace, aggregate
from .refiners import METHODS, OnlineRefiner, RefinerConfig
from .streams import (
    QueryStream,
    StreamConfig,
    episode_budget,
    next_major_cluster,
    sample_stream,
    sample_stream_family,
)

__version__ = "0.1.0"

__all__ = [
    "Arch",
    "AggregateReport",
    "BiMemory",
    "ClusterSet",
    "ClusterShift",
    "Example",
    "GeneratorSpec",
    "LearnerConfig",
    "LearnerState",
    "METHODS",
    "MetricsConfig",
    "MetricTrace",
    "OnlineRefiner",
    "QueryStream",
    "RefinerConfig",
    "ReplaySelection",
    "RunConfig",
    "RunResult",
    "StreamConfig",
    "aggregate",
    "default_dynamics_variants",
    "default_generator_spec",
    "default_grids",
    "dynamics_grid",
    "episode_budget",
    "execute_run",
    "fine_tune",
    "generate_clusters",
    "load_clusters",
    "memory_write",
    "next_major_cluster",
    "predict",
    "run_episode_loop",
    "run_reference_frozen",
    "run_reference_offline",
    "sample_stream",
    "sample_stream_family",
    "save_clusters",
    "select_conditional",
    "select_random",
    "sweep",
    "train_upstream",
    "write_run",
]
