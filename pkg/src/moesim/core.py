"""Core value types for expert-parallel MoE scheduling.

Everything in this module is an immutable value object: the numpy arrays
backing the count tensors are copied on construction and marked read-only,
so instances can be shared freely across threads. All schedule manipulation
happens by building new tensors, never by mutating existing ones.

Indices are dense and 0-based for both GPUs and experts. Token identity is
deliberately dropped: all timing downstream depends only on token counts
and byte sizes, so the simulator carries counts alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _as_count_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.int64, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size and arr.min() < 0:
        raise ValueError(f"{name} entries must be non-negative")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ClusterSpec:
    """Hardware description of the GPU cluster being simulated.

    Rates are in bytes/second and FLOP/second; latency in seconds.
    ``expert_slots_per_gpu`` is the per-layer expert cache capacity; it must
    be at least 2 so that prefetching a new expert can overlap computing
    with an already-loaded one.
    """

    num_gpus: int
    expert_slots_per_gpu: int
    link_bandwidth: float
    link_latency: float
    pcie_bandwidth: float
    gpu_flops: float

    def __post_init__(self):
        if self.num_gpus < 1:
            raise ValueError("num_gpus must be >= 1")
        if self.expert_slots_per_gpu < 2:
            raise ValueError("expert_slots_per_gpu must be >= 2")
        for name in ("link_bandwidth", "pcie_bandwidth", "gpu_flops"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.link_latency < 0:
            raise ValueError("link_latency must be >= 0")


@dataclass(frozen=True)
class ModelSpec:
    """MoE model description.

    An expert is a two-layer MLP with weight shapes (d_model x d_ff) and
    (d_ff x d_model); its byte size is always derived as
    ``2 * d_model * d_ff * dtype_bytes``, never stored.
    ``non_moe_layer_time`` is a fixed per-layer constant covering attention
    and the dense parts of the block.
    """

    num_layers: int
    num_experts: int
    d_model: int
    d_ff: int
    dtype_bytes: int
    non_moe_layer_time: float = 0.0

    def __post_init__(self):
        for name in ("num_layers", "num_experts", "d_model", "d_ff", "dtype_bytes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.non_moe_layer_time < 0:
            raise ValueError("non_moe_layer_time must be >= 0")

    @property
    def expert_bytes(self) -> int:
        return 2 * self.d_model * self.d_ff * self.dtype_bytes


@dataclass(frozen=True, eq=False)
class RoutingMatrix:
    """Per-source-GPU token-to-expert counts for one layer of one batch.

    ``counts[g][e]`` is the number of tokens on source GPU ``g`` that the
    router assigned to expert ``e``. Row sums equal each GPU's minibatch
    size. This is the metadata every GPU exchanges before scheduling.
    """

    counts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "counts", _as_count_array(self.counts, 2, "RoutingMatrix.counts"))

    @property
    def num_gpus(self) -> int:
        return self.counts.shape[0]

    @property
    def num_experts(self) -> int:
        return self.counts.shape[1]

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoutingMatrix):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    def __hash__(self):
        return hash((self.counts.shape, self.counts.tobytes()))


@dataclass(frozen=True, eq=False)
class ScheduleTensor:
    """Token movement plan for one layer.

    ``counts[g_from][e][g_to]`` is the number of tokens originating on GPU
    ``g_from``, routed to expert ``e``, that will be executed on GPU
    ``g_to``. The first and last axes have equal length (the GPU set).
    """

    counts: np.ndarray

    def __post_init__(self):
        arr = _as_count_array(self.counts, 3, "ScheduleTensor.counts")
        if arr.shape[0] != arr.shape[2]:
            raise ValueError(f"source and destination GPU axes must agree, got shape {arr.shape}")
        object.__setattr__(self, "counts", arr)

    @property
    def num_gpus(self) -> int:
        return self.counts.shape[0]

    @property
    def num_experts(self) -> int:
        return self.counts.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScheduleTensor):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    def __hash__(self):
        return hash((self.counts.shape, self.counts.tobytes()))


@dataclass(frozen=True)
class Placement:
    """Static expert-to-GPU home assignment.

    ``home[e]`` is the GPU that statically holds expert ``e``. Experts may
    outnumber GPU slots only up to ``expert_slots_per_gpu`` homes per GPU;
    that capacity check needs a cluster and lives in ``fits``. E < G is
    legal: GPUs with no home experts receive work only through rebalancing.
    """

    home: tuple[int, ...]
    num_gpus: int

    def __post_init__(self):
        if self.num_gpus < 1:
            raise ValueError("num_gpus must be >= 1")
        if not self.home:
            raise ValueError("placement must cover at least one expert")
        for e, g in enumerate(self.home):
            if not 0 <= g < self.num_gpus:
                raise ValueError(f"expert {e} homed on invalid GPU {g}")

    @property
    def num_experts(self) -> int:
        return len(self.home)

    def homes_on(self, gpu: int) -> tuple[int, ...]:
        """Experts whose static home is ``gpu``, in index order."""
        return tuple(e for e, g in enumerate(self.home) if g == gpu)

    def home_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_gpus, dtype=np.int64)
        for g in self.home:
            counts[g] += 1
        return counts

    def fits(self, expert_slots_per_gpu: int) -> bool:
        return int(self.home_counts().max()) <= expert_slots_per_gpu


def total_tokens(s: ScheduleTensor) -> int:
    """Total number of tokens moved by a schedule."""
    return int(s.counts.sum())


def load_per_gpu(s: ScheduleTensor) -> np.ndarray:
    """Tokens each destination GPU executes: sum over sources and experts."""
    return s.counts.sum(axis=(0, 1))


def validate_against(s: ScheduleTensor, m: RoutingMatrix) -> bool:
    """Check token conservation of a schedule against its routing matrix.

    True iff for every (source GPU, expert) pair the schedule sends exactly
    the number of tokens the router produced, i.e. no tokens are created,
    dropped, or reassigned to a different expert.
    """
    if s.num_gpus != m.num_gpus or s.num_experts != m.num_experts:
        raise ValueError(
            f"shape mismatch: schedule is {s.num_gpus}x{s.num_experts}, "
            f"routing matrix is {m.num_gpus}x{m.num_experts}"
        )
    return bool(np.array_equal(s.counts.sum(axis=2), m.counts))
