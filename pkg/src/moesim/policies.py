"""Expert placement and token scheduling policies.

Four scheduling policies are provided:

* ``rebalance`` - the load-aware scheduler: assign every (source, expert)
  bucket to the expert's home GPU, then greedily move whole chunks of
  tokens from the most loaded GPU to the least loaded one until the load
  is flat or no move of at least ``q`` tokens is feasible.
* ``round_robin`` - static home assignment only, no rebalancing.
* ``even_split`` - split every expert's tokens evenly over all GPUs.
* ``affinity`` - static placement from profiled expert popularity, greedy
  longest-processing-time bin packing (a deliberately simplified stand-in
  for offline placement optimizers).

All argmax/argmin ties break to the lowest index, so every operation here
is a pure, deterministic function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from moesim.core import Placement, RoutingMatrix, ScheduleTensor


class SchedulingPolicy(str, Enum):
    REBALANCE = "rebalance"
    ROUND_ROBIN = "round_robin"
    EVEN_SPLIT = "even_split"
    AFFINITY = "affinity"


class PlacementKind(str, Enum):
    ROUND_ROBIN = "round_robin"
    BLOCKED = "blocked"


@dataclass(frozen=True)
class SchedulerConfig:
    """Scheduling knobs for a simulation run.

    ``token_threshold_q`` is the minimum number of tokens worth moving to
    another GPU (see :func:`estimate_token_threshold` for the derived
    default). ``placement`` selects the static expert layout for the
    non-affinity policies. ``affinity_refresh_batches`` re-profiles and
    re-packs the affinity placement every N batches; None keeps the first
    profiled placement for the rest of the run.
    """

    token_threshold_q: int
    policy: SchedulingPolicy = SchedulingPolicy.REBALANCE
    placement: PlacementKind = PlacementKind.ROUND_ROBIN
    affinity_refresh_batches: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "policy", SchedulingPolicy(self.policy))
        object.__setattr__(self, "placement", PlacementKind(self.placement))
        if self.token_threshold_q < 1:
            raise ValueError("token_threshold_q must be >= 1")
        if self.affinity_refresh_batches is not None and self.affinity_refresh_batches < 1:
            raise ValueError("affinity_refresh_batches must be >= 1 when set")


@dataclass(frozen=True)
class PopularityProfile:
    """Cumulative per-expert token counts observed over a profiling window."""

    counts: np.ndarray
    window_batches: int

    def __post_init__(self):
        arr = np.array(self.counts, dtype=np.int64, copy=True)
        if arr.ndim != 1:
            raise ValueError("profile counts must be one-dimensional")
        if arr.size and arr.min() < 0:
            raise ValueError("profile counts must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)
        if self.window_batches < 0:
            raise ValueError("window_batches must be >= 0")

    @property
    def num_experts(self) -> int:
        return self.counts.shape[0]


def round_robin_placement(num_experts: int, num_gpus: int) -> Placement:
    """Expert e homes on GPU e mod G."""
    if num_experts < 1 or num_gpus < 1:
        raise ValueError("num_experts and num_gpus must be >= 1")
    return Placement(home=tuple(e % num_gpus for e in range(num_experts)), num_gpus=num_gpus)


def blocked_placement(num_experts: int, num_gpus: int) -> Placement:
    """Contiguous blocks of ceil(E/G) experts per GPU, last GPUs may be short."""
    if num_experts < 1 or num_gpus < 1:
        raise ValueError("num_experts and num_gpus must be >= 1")
    block = -(-num_experts // num_gpus)
    return Placement(
        home=tuple(min(e // block, num_gpus - 1) for e in range(num_experts)),
        num_gpus=num_gpus,
    )


def initial_assign(m_all: RoutingMatrix, placement: Placement) -> ScheduleTensor:
    """Naive schedule: every (source, expert) bucket goes to the expert's home GPU."""
    if placement.num_experts != m_all.num_experts or placement.num_gpus != m_all.num_gpus:
        raise ValueError("placement dimensions do not match routing matrix")
    g, e = m_all.num_gpus, m_all.num_experts
    counts = np.zeros((g, e, g), dtype=np.int64)
    home = np.asarray(placement.home, dtype=np.int64)
    counts[np.arange(g)[:, None], np.arange(e)[None, :], home[None, :]] = m_all.counts
    return ScheduleTensor(counts)


def _rebalance_core(counts: np.ndarray, q: int) -> tuple[np.ndarray, int]:
    num_gpus = counts.shape[0]
    t_avg = int(counts.sum()) // num_gpus
    t_g = counts.sum(axis=(0, 1))
    iterations = 0
    while bool(np.any(t_g > t_avg)):
        g_max = int(np.argmax(t_g))
        g_from = int(np.argmax(counts[:, :, g_max].sum(axis=1)))
        e_max = int(np.argmax(counts[g_from, :, g_max]))
        t_move = int(counts[g_from, e_max, g_max])
        if t_move < q:
            break  # insufficient tokens to move
        g_min = int(np.argmin(t_g))
        if g_min == g_max or int(t_g[g_min]) + q > t_avg:
            break  # no feasible transfer
        t_s = min(t_move, t_avg - int(t_g[g_min]))
        counts[g_from, e_max, g_max] -= t_s
        counts[g_from, e_max, g_min] += t_s
        t_g[g_max] -= t_s
        t_g[g_min] += t_s
        iterations += 1
    return counts, iterations


def rebalance(s_initial: ScheduleTensor, q: int) -> ScheduleTensor:
    """Greedy token rebalancing from overloaded to underloaded GPUs.

    While some GPU holds more than the floor-average token count, pick the
    most loaded GPU, the source GPU contributing the most tokens to it, and
    that source's largest (expert, destination) bucket; redirect
    ``min(bucket, avg - min_load)`` of those tokens to the least loaded
    GPU. Stops early if the bucket holds fewer than ``q`` tokens or the
    least loaded GPU cannot take ``q`` more without passing the average.

    When the total is not divisible by G the loop cannot end by balancing
    alone (some GPU always sits above the floor average); termination then
    comes through the no-feasible-transfer guard, which is intended.

    Per-(source, expert) token conservation always holds, the maximum load
    never increases, and any GPU whose load grew ends at or below the
    floor average.
    """
    s, _ = rebalance_with_stats(s_initial, q)
    return s


def rebalance_with_stats(s_initial: ScheduleTensor, q: int) -> tuple[ScheduleTensor, int]:
    """Same as :func:`rebalance`, also reporting the number of moves made."""
    if q < 1:
        raise ValueError("token threshold q must be >= 1")
    counts, iterations = _rebalance_core(s_initial.counts.copy(), q)
    return ScheduleTensor(counts), iterations


def even_split_assign(m_all: RoutingMatrix, num_gpus: int) -> ScheduleTensor:
    """Split each expert's total tokens evenly across all GPUs.

    The per-expert total (pooled over sources) is divided as evenly as
    integers allow, remainder to the lowest-index GPUs, so per-GPU loads
    differ by at most one token per expert. Source attribution fills the
    per-GPU targets in index order, preserving each source row's total.
    """
    if num_gpus != m_all.num_gpus:
        raise ValueError("num_gpus does not match routing matrix")
    g, e = m_all.num_gpus, m_all.num_experts
    counts = np.zeros((g, e, g), dtype=np.int64)
    for expert in range(e):
        col = m_all.counts[:, expert]
        total = int(col.sum())
        if total == 0:
            continue
        base, rem = divmod(total, g)
        remaining = np.full(g, base, dtype=np.int64)
        remaining[:rem] += 1
        dest = 0
        for src in range(g):
            left = int(col[src])
            while left > 0:
                while remaining[dest] == 0:
                    dest += 1
                take = min(left, int(remaining[dest]))
                counts[src, expert, dest] += take
                remaining[dest] -= take
                left -= take
    return ScheduleTensor(counts)


def affinity_placement(profile: PopularityProfile, num_gpus: int, slots: int) -> Placement:
    """Greedy LPT packing of experts onto GPUs by profiled popularity.

    Experts are placed in order of descending popularity onto the GPU with
    the smallest accumulated popularity mass that still has a free slot.
    Ties (popularity and mass alike) break to the lowest index.
    """
    num_experts = profile.num_experts
    if num_experts > num_gpus * slots:
        raise ValueError(
            f"infeasible placement: {num_experts} experts > {num_gpus} GPUs x {slots} slots"
        )
    order = sorted(range(num_experts), key=lambda e: (-int(profile.counts[e]), e))
    mass = [0] * num_gpus
    used = [0] * num_gpus
    home = [0] * num_experts
    for e in order:
        candidates = [g for g in range(num_gpus) if used[g] < slots]
        g_best = min(candidates, key=lambda g: (mass[g], g))
        home[e] = g_best
        mass[g_best] += int(profile.counts[e])
        used[g_best] += 1
    return Placement(home=tuple(home), num_gpus=num_gpus)


def estimate_token_threshold(gpu_flops: float, dtype_bytes: float, pcie_bandwidth: float) -> int:
    """Smallest token batch whose expert compute time covers an expert fetch.

    Returns ``ceil(gpu_flops * dtype_bytes / (2 * pcie_bandwidth)) + 1``,
    an integer strictly above the break-even bound: moving at least this
    many tokens guarantees the receiving GPU can hide the weight transfer
    behind computation.
    """
    if gpu_flops <= 0 or dtype_bytes <= 0 or pcie_bandwidth <= 0:
        raise ValueError("gpu_flops, dtype_bytes, and pcie_bandwidth must be positive")
    bound = gpu_flops * dtype_bytes / (2.0 * pcie_bandwidth)
    nearest = round(bound)
    if abs(bound - nearest) <= 1e-9 * max(1.0, abs(bound)):
        ceil_bound = int(nearest)  # guard float jitter around integer bounds
    else:
        ceil_bound = math.ceil(bound)
    return max(ceil_bound + 1, 1)


def threshold_bound(gpu_flops: float, dtype_bytes: float, pcie_bandwidth: float) -> float:
    """The raw break-even bound the threshold must strictly exceed."""
    if gpu_flops <= 0 or dtype_bytes <= 0 or pcie_bandwidth <= 0:
        raise ValueError("gpu_flops, dtype_bytes, and pcie_bandwidth must be positive")
    return gpu_flops * dtype_bytes / (2.0 * pcie_bandwidth)
