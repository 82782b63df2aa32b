"""Deterministic simulator for expert-parallel MoE inference scheduling."""

from moesim.core import (
    ClusterSpec,
    ModelSpec,
    Placement,
    RoutingMatrix,
    ScheduleTensor,
    load_per_gpu,
    total_tokens,
    validate_against,
)
from moesim.engine import (
    CostModel,
    EventCategory,
    ExecutionPlan,
    GpuTimeline,
    LayerResult,
    SimFlags,
    TimelineEvent,
    all_to_all_time,
    plan_gpu_execution,
    simulate_layer,
    simulate_run,
)
from moesim.metrics import (
    RunMetrics,
    load_ecdf,
    mean_ttft,
    throughput,
    throughput_variance,
    wait_fraction,
    write_reports,
)
from moesim.policies import (
    PlacementKind,
    PopularityProfile,
    SchedulerConfig,
    SchedulingPolicy,
    affinity_placement,
    blocked_placement,
    estimate_token_threshold,
    even_split_assign,
    initial_assign,
    rebalance,
    rebalance_with_stats,
    round_robin_placement,
)
from moesim.presets import MODEL_PRESETS, model_preset
from moesim.workload import (
    SkewSpec,
    Trace,
    TraceBatch,
    TraceParseError,
    WorkloadSpec,
    generate_trace,
    read_trace,
    sample_routing,
    skew_probabilities,
    write_trace,
)

__version__ = "0.1.0"

__all__ = [
    "ClusterSpec",
    "ModelSpec",
    "Placement",
    "RoutingMatrix",
    "ScheduleTensor",
    "load_per_gpu",
    "total_tokens",
    "validate_against",
    "CostModel",
    "EventCategory",
    "ExecutionPlan",
    "GpuTimeline",
    "LayerResult",
    "SimFlags",
    "TimelineEvent",
    "all_to_all_time",
    "plan_gpu_execution",
    "simulate_layer",
    "simulate_run",
    "RunMetrics",
    "load_ecdf",
    "mean_ttft",
    "throughput",
    "throughput_variance",
    "wait_fraction",
    "write_reports",
    "PlacementKind",
    "PopularityProfile",
    "SchedulerConfig",
    "SchedulingPolicy",
    "affinity_placement",
    "blocked_placement",
    "estimate_token_threshold",
    "even_split_assign",
    "initial_assign",
    "rebalance",
    "rebalance_with_stats",
    "round_robin_placement",
    "MODEL_PRESETS",
    "model_preset",
    "SkewSpec",
    "Trace",
    "TraceBatch",
    "TraceParseError",
    "WorkloadSpec",
    "generate_trace",
    "read_trace",
    "sample_routing",
    "skew_probabilities",
    "write_trace",
]
