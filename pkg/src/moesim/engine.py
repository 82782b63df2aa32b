"""Deterministic per-layer simulation of expert-parallel MoE inference.

Each MoE layer is simulated as six phases executed by every GPU in
lockstep: metadata exchange, schedule construction, an all-to-all token
scatter, per-GPU expert execution with (optionally asynchronous) expert
fetching, and an all-to-all gather of the results. Scatter and gather are
strict barriers: no GPU starts expert work before the scatter completes
and no GPU starts the gather before the last GPU finishes computing.

Expert fetching models a single transfer channel per GPU (at most one
fetch in flight) and overwrite semantics: a fetched expert is written
directly over a cache slot whose occupant has no remaining work this
layer, so no write-back ever appears on the load path. Fetched experts are
temporary; the cache resets to the static placement at each layer boundary
because the next layer's experts have disjoint weights.

All times are in seconds, accumulated in double precision. A single run is
strictly single-threaded and bit-deterministic; independent runs can be
executed in parallel.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from moesim.core import (
    ClusterSpec,
    ModelSpec,
    Placement,
    RoutingMatrix,
    ScheduleTensor,
    load_per_gpu,
)
from moesim.metrics import RunMetrics
from moesim.policies import (
    PlacementKind,
    PopularityProfile,
    SchedulerConfig,
    SchedulingPolicy,
    affinity_placement,
    blocked_placement,
    even_split_assign,
    initial_assign,
    rebalance,
    round_robin_placement,
)
from moesim.workload import Trace

METADATA_BYTES = 4096  # per-GPU routing summary exchanged before scheduling


class EventCategory(str, Enum):
    SCHEDULE = "schedule"
    METADATA = "metadata"
    SCATTER = "scatter"
    COMPUTE = "compute"
    EXPERT_LOAD_SYNC = "expert_load_sync"
    EXPERT_LOAD_ASYNC = "expert_load_async"
    GATHER = "gather"
    WAIT = "wait"


# Asynchronous fetches overlap compute and are excluded from the wall-time
# partition; every other category tiles a GPU's layer span exactly.
PARTITION_CATEGORIES = tuple(c for c in EventCategory if c is not EventCategory.EXPERT_LOAD_ASYNC)


@dataclass(frozen=True)
class SimFlags:
    """Ablation switches for the simulated scheduler."""

    rebalancing_enabled: bool = True
    async_loading_enabled: bool = True
    include_scheduler_walltime: bool = False


@dataclass(frozen=True)
class CostModel:
    """Analytic costs for expert compute, expert fetches, and token bytes.

    An expert is a two-layer MLP with weights (d_model x d_ff) and
    (d_ff x d_model); processing n tokens costs
    ``n*d_ff*(2*d_model-1) + n*d_model*(2*d_ff-1)`` floating point
    operations. Fetching an expert moves ``2*d_model*d_ff*dtype_bytes``
    over the host link; thanks to overwrite semantics the load path never
    includes an offload write-back.
    """

    d_model: int
    d_ff: int
    dtype_bytes: int
    gpu_flops: float
    pcie_bandwidth: float
    metadata_time: float

    @classmethod
    def from_specs(
        cls, cluster: ClusterSpec, model: ModelSpec, metadata_time: float | None = None
    ) -> "CostModel":
        if metadata_time is None:
            metadata_time = METADATA_BYTES / cluster.link_bandwidth + cluster.link_latency
        return cls(
            d_model=model.d_model,
            d_ff=model.d_ff,
            dtype_bytes=model.dtype_bytes,
            gpu_flops=cluster.gpu_flops,
            pcie_bandwidth=cluster.pcie_bandwidth,
            metadata_time=metadata_time,
        )

    @property
    def expert_bytes(self) -> int:
        return 2 * self.d_model * self.d_ff * self.dtype_bytes

    @property
    def token_bytes(self) -> int:
        return self.d_model * self.dtype_bytes

    @property
    def expert_load_time(self) -> float:
        return self.expert_bytes / self.pcie_bandwidth

    def expert_flops(self, tokens: int) -> int:
        return tokens * self.d_ff * (2 * self.d_model - 1) + tokens * self.d_model * (2 * self.d_ff - 1)

    def expert_compute_time(self, tokens: int) -> float:
        return self.expert_flops(tokens) / self.gpu_flops


@dataclass(frozen=True)
class TimelineEvent:
    category: EventCategory
    start: float
    duration: float
    expert: int | None = None
    tokens: int | None = None

    @property
    def end(self) -> float:
        return self.start + self.duration

    def shifted(self, offset: float) -> "TimelineEvent":
        return TimelineEvent(self.category, self.start + offset, self.duration, self.expert, self.tokens)


@dataclass
class GpuTimeline:
    """Ordered event list for one GPU over one layer, starting at t=0."""

    gpu: int
    events: list[TimelineEvent] = field(default_factory=list)

    def span(self) -> float:
        ends = [ev.end for ev in self.events if ev.category is not EventCategory.EXPERT_LOAD_ASYNC]
        return max(ends) if ends else 0.0

    def category_seconds(self) -> dict[EventCategory, float]:
        out: dict[EventCategory, float] = {}
        for ev in self.events:
            out[ev.category] = out.get(ev.category, 0.0) + ev.duration
        return out


@dataclass
class ExecutionPlan:
    """Per-GPU expert execution schedule relative to the start of the phase."""

    events: list[TimelineEvent]
    span: float
    fetch_count: int


@dataclass
class LayerResult:
    layer_latency: float
    timelines: list[GpuTimeline]
    expert_swaps: int
    loads: np.ndarray
    schedule: ScheduleTensor


def all_to_all_time(bytes_out, bytes_in, cluster: ClusterSpec) -> float:
    """Duration of one barrier-synchronized all-to-all exchange.

    The exchange is modeled as latency plus the largest single-GPU byte
    flow (send or receive) over the link bandwidth. Self-destined traffic
    must already be excluded by the caller.
    """
    bytes_out = np.asarray(bytes_out, dtype=np.float64)
    bytes_in = np.asarray(bytes_in, dtype=np.float64)
    if bytes_out.shape != (cluster.num_gpus,) or bytes_in.shape != (cluster.num_gpus,):
        raise ValueError("byte vectors must have one entry per GPU")
    if bytes_out.min(initial=0.0) < 0 or bytes_in.min(initial=0.0) < 0:
        raise ValueError("byte counts must be non-negative")
    peak = float(np.maximum(bytes_out, bytes_in).max(initial=0.0))
    return cluster.link_latency + peak / cluster.link_bandwidth


def plan_gpu_execution(
    work,
    resident,
    slots: int,
    flags: SimFlags,
    cost: CostModel,
) -> ExecutionPlan:
    """Schedule one GPU's expert computes and fetches for a layer.

    ``work`` is a list of (expert, token_count) pairs; ``resident`` the
    experts statically cached on this GPU. Resident experts with work run
    first (descending tokens, lowest index on ties), then non-resident ones
    in the same order, which maximizes the compute available to hide each
    fetch.

    With asynchronous loading, a fetch starts as soon as the single
    transfer channel is free and some cache slot is overwritable (its
    occupant finished its work this layer, never had any, or the slot is
    empty). Each expert's compute starts at the later of its predecessor's
    compute end and its own fetch end; stall gaps are recorded as wait
    events. With asynchronous loading disabled each fetch occupies the
    compute track instead.
    """
    if slots < 2:
        raise ValueError("expert cache must hold at least 2 experts")
    resident = set(int(e) for e in resident)
    if len(resident) > slots:
        raise ValueError(f"{len(resident)} resident experts exceed {slots} slots")
    work = [(int(e), int(n)) for e, n in work if int(n) > 0]
    resident_work = sorted((w for w in work if w[0] in resident), key=lambda w: (-w[1], w[0]))
    fetched_work = sorted((w for w in work if w[0] not in resident), key=lambda w: (-w[1], w[0]))

    events: list[TimelineEvent] = []
    overwritable: list[float] = []  # instants at which cache slots free up
    scheduled = {e for e, _ in resident_work}
    for _ in range(slots - len(resident)):
        heapq.heappush(overwritable, 0.0)
    for e in resident:
        if e not in scheduled:
            heapq.heappush(overwritable, 0.0)

    t_compute = 0.0
    t_channel = 0.0
    for e, n in resident_work:
        duration = cost.expert_compute_time(n)
        events.append(TimelineEvent(EventCategory.COMPUTE, t_compute, duration, expert=e, tokens=n))
        t_compute += duration
        heapq.heappush(overwritable, t_compute)

    for e, n in fetched_work:
        # Residents-with-work precede all fetches, so by the first fetch every
        # slot is either free or bound to a compute with a known end time.
        assert overwritable, "no overwritable slot available for expert fetch"
        slot_free = heapq.heappop(overwritable)
        load = cost.expert_load_time
        if flags.async_loading_enabled:
            fetch_start = max(t_channel, slot_free)
            events.append(TimelineEvent(EventCategory.EXPERT_LOAD_ASYNC, fetch_start, load, expert=e))
            t_channel = fetch_start + load
            if t_channel > t_compute:
                events.append(TimelineEvent(EventCategory.WAIT, t_compute, t_channel - t_compute))
                t_compute = t_channel
        else:
            assert slot_free <= t_compute + 1e-12
            events.append(TimelineEvent(EventCategory.EXPERT_LOAD_SYNC, t_compute, load, expert=e))
            t_compute += load
        duration = cost.expert_compute_time(n)
        events.append(TimelineEvent(EventCategory.COMPUTE, t_compute, duration, expert=e, tokens=n))
        t_compute += duration
        heapq.heappush(overwritable, t_compute)

    return ExecutionPlan(events=events, span=t_compute, fetch_count=len(fetched_work))


def _exchange_byte_vectors(schedule: ScheduleTensor, token_bytes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-GPU scatter send/receive bytes; self-destined tokens cost nothing."""
    flows = schedule.counts.sum(axis=1).astype(np.float64)  # [g_from, g_to] tokens
    self_traffic = np.diag(flows).copy()
    sent = (flows.sum(axis=1) - self_traffic) * token_bytes
    received = (flows.sum(axis=0) - self_traffic) * token_bytes
    return sent, received


def build_schedule(
    m_all: RoutingMatrix,
    placement: Placement,
    config: SchedulerConfig,
    flags: SimFlags,
) -> ScheduleTensor:
    """Construct the token schedule the active policy would emit."""
    if config.policy is SchedulingPolicy.EVEN_SPLIT:
        return even_split_assign(m_all, m_all.num_gpus)
    schedule = initial_assign(m_all, placement)
    if config.policy is SchedulingPolicy.REBALANCE and flags.rebalancing_enabled:
        schedule = rebalance(schedule, config.token_threshold_q)
    return schedule


def simulate_layer(
    m_all: RoutingMatrix,
    placement: Placement,
    config: SchedulerConfig,
    flags: SimFlags,
    cost: CostModel,
    cluster: ClusterSpec,
) -> LayerResult:
    """Simulate one MoE layer end to end and return per-GPU timelines.

    Single-GPU clusters skip both all-to-all phases entirely. With
    ``include_scheduler_walltime`` the measured host time of schedule
    construction is injected as a schedule event on every GPU (each GPU
    runs the identical deterministic scheduler in parallel); this is off by
    default because it makes simulated times host-dependent.
    """
    num_gpus = m_all.num_gpus
    if num_gpus != cluster.num_gpus:
        raise ValueError("routing matrix GPU count does not match cluster")
    if placement.num_experts != m_all.num_experts or placement.num_gpus != num_gpus:
        raise ValueError("placement dimensions do not match routing matrix")
    if not placement.fits(cluster.expert_slots_per_gpu):
        raise ValueError("placement exceeds expert slot capacity")

    events_per_gpu: list[list[TimelineEvent]] = [[] for _ in range(num_gpus)]
    cursor = 0.0
    if cost.metadata_time > 0:
        for g in range(num_gpus):
            events_per_gpu[g].append(TimelineEvent(EventCategory.METADATA, cursor, cost.metadata_time))
        cursor += cost.metadata_time

    started = time.perf_counter()
    schedule = build_schedule(m_all, placement, config, flags)
    if flags.include_scheduler_walltime:
        schedule_time = time.perf_counter() - started
        for g in range(num_gpus):
            events_per_gpu[g].append(TimelineEvent(EventCategory.SCHEDULE, cursor, schedule_time))
        cursor += schedule_time

    token_bytes = cost.token_bytes
    if num_gpus > 1:
        sent, received = _exchange_byte_vectors(schedule, token_bytes)
        scatter_time = all_to_all_time(sent, received, cluster)
        if scatter_time > 0:
            for g in range(num_gpus):
                events_per_gpu[g].append(TimelineEvent(EventCategory.SCATTER, cursor, scatter_time))
            cursor += scatter_time

    exec_start = cursor
    per_dest_expert = schedule.counts.sum(axis=0)  # [expert, g_to]
    spans = np.zeros(num_gpus, dtype=np.float64)
    swaps = 0
    for g in range(num_gpus):
        work = [(e, int(per_dest_expert[e, g])) for e in range(m_all.num_experts) if per_dest_expert[e, g] > 0]
        plan = plan_gpu_execution(work, placement.homes_on(g), cluster.expert_slots_per_gpu, flags, cost)
        events_per_gpu[g].extend(ev.shifted(exec_start) for ev in plan.events)
        spans[g] = plan.span
        swaps += plan.fetch_count

    barrier = exec_start + float(spans.max())
    for g in range(num_gpus):
        gap = barrier - (exec_start + spans[g])
        if gap > 0:
            events_per_gpu[g].append(TimelineEvent(EventCategory.WAIT, exec_start + spans[g], gap))
    cursor = barrier

    if num_gpus > 1:
        # Gather mirrors the scatter: every processed token returns to its source.
        sent, received = _exchange_byte_vectors(schedule, token_bytes)
        gather_time = all_to_all_time(received, sent, cluster)
        if gather_time > 0:
            for g in range(num_gpus):
                events_per_gpu[g].append(TimelineEvent(EventCategory.GATHER, cursor, gather_time))
            cursor += gather_time

    timelines = [GpuTimeline(gpu=g, events=events_per_gpu[g]) for g in range(num_gpus)]
    return LayerResult(
        layer_latency=cursor,
        timelines=timelines,
        expert_swaps=swaps,
        loads=load_per_gpu(schedule),
        schedule=schedule,
    )


def static_placement(config: SchedulerConfig, num_experts: int, num_gpus: int) -> Placement:
    if config.placement is PlacementKind.BLOCKED:
        return blocked_placement(num_experts, num_gpus)
    return round_robin_placement(num_experts, num_gpus)


def simulate_run(
    trace: Trace,
    model: ModelSpec,
    cluster: ClusterSpec,
    config: SchedulerConfig,
    flags: SimFlags,
    cost: CostModel | None = None,
) -> RunMetrics:
    """Replay a trace batch by batch and aggregate run-level metrics.

    Batch latency is the sum over layers of the layer latency plus the
    fixed non-MoE block time; it stands in for time-to-first-token since
    each batch is a single forward pass. The affinity policy starts from a
    round-robin layout, builds its first popularity profile after batch 0,
    and re-packs on the configured refresh period.
    """
    if trace.num_gpus != cluster.num_gpus:
        raise ValueError(f"trace has {trace.num_gpus} GPUs, cluster has {cluster.num_gpus}")
    if trace.num_experts != model.num_experts:
        raise ValueError(f"trace has {trace.num_experts} experts, model has {model.num_experts}")
    if trace.num_layers != model.num_layers:
        raise ValueError(f"trace has {trace.num_layers} layers, model has {model.num_layers}")
    if cost is None:
        cost = CostModel.from_specs(cluster, model)

    placement = static_placement(config, model.num_experts, cluster.num_gpus)
    if not placement.fits(cluster.expert_slots_per_gpu):
        raise ValueError("static placement exceeds expert slot capacity")

    num_gpus = cluster.num_gpus
    expert_totals = np.zeros(model.num_experts, dtype=np.int64)
    breakdown: dict[tuple[int, int, str], float] = {}
    per_batch_latency: list[float] = []
    per_batch_throughput: list[float] = []
    per_batch_alpha: list[float] = []
    expert_swaps_per_batch: list[int] = []
    per_gpu_token_loads: list[np.ndarray] = []
    wait_seconds = np.zeros(num_gpus, dtype=np.float64)
    span_seconds = np.zeros(num_gpus, dtype=np.float64)
    total_tokens = 0

    for batch_index, batch in enumerate(trace.batches):
        if config.policy is SchedulingPolicy.AFFINITY and batch_index > 0:
            period = config.affinity_refresh_batches
            refresh_now = (batch_index == 1) if period is None else (batch_index % period == 0)
            if refresh_now:
                profile = PopularityProfile(counts=expert_totals, window_batches=batch_index)
                placement = affinity_placement(profile, num_gpus, cluster.expert_slots_per_gpu)

        batch_tokens = int(batch.layers[0].counts.sum())
        batch_latency = 0.0
        batch_swaps = 0
        for layer_index, m_all in enumerate(batch.layers):
            result = simulate_layer(m_all, placement, config, flags, cost, cluster)
            batch_latency += result.layer_latency + model.non_moe_layer_time
            batch_swaps += result.expert_swaps
            per_gpu_token_loads.append(result.loads)
            expert_totals = expert_totals + m_all.counts.sum(axis=0)
            for tl in result.timelines:
                span_seconds[tl.gpu] += result.layer_latency
                for category, seconds in tl.category_seconds().items():
                    if category is EventCategory.WAIT:
                        wait_seconds[tl.gpu] += seconds
                    key = (layer_index, tl.gpu, category.value)
                    breakdown[key] = breakdown.get(key, 0.0) + seconds

        per_batch_latency.append(batch_latency)
        per_batch_throughput.append(batch_tokens / batch_latency)
        per_batch_alpha.append(batch.alpha)
        expert_swaps_per_batch.append(batch_swaps)
        total_tokens += batch_tokens

    return RunMetrics(
        total_tokens=total_tokens,
        duration=float(sum(per_batch_latency)),
        per_batch_latency=per_batch_latency,
        per_batch_throughput=per_batch_throughput,
        per_batch_alpha=per_batch_alpha,
        expert_swaps_per_batch=expert_swaps_per_batch,
        per_layer_breakdown=breakdown,
        per_gpu_token_loads=per_gpu_token_loads,
        per_expert_tokens=expert_totals,
        per_gpu_wait_seconds=wait_seconds,
        per_gpu_span_seconds=span_seconds,
    )
