"""Synthetic workload generation and trace file I/O.

Routing decisions are produced by a configurable skewed sampler: a chosen
set of experts shares a probability mass ``alpha`` and the remaining
experts split ``1 - alpha`` evenly. Tokens are then drawn per source GPU
from a multinomial over those probabilities, which reproduces the kind of
dynamic expert-popularity imbalance seen in real datasets while staying
fully deterministic per seed.

The RNG is numpy's PCG64 behind ``numpy.random.Generator``; the generator
name and seed are recorded in every trace header so a trace can always be
regenerated instead of shipped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from moesim.core import ModelSpec, RoutingMatrix

RNG_NAME = "numpy-pcg64"
TRACE_VERSION = 1

MODE_FIXED = "fixed"
MODE_RESAMPLE_UNIFORM = "resample_uniform"


class TraceParseError(ValueError):
    """Malformed trace file; carries the 1-based offending line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class SkewSpec:
    """Expert-popularity skew configuration.

    ``alpha`` is the probability mass concentrated on ``skewed_experts``.
    With ``mode == "resample_uniform"`` a fresh alpha is drawn uniformly in
    [resample_lo, resample_hi] for every batch; otherwise alpha is constant.
    """

    alpha: float
    skewed_experts: tuple[int, ...] = (0,)
    mode: str = MODE_FIXED
    resample_lo: float = 0.0
    resample_hi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "skewed_experts", tuple(int(e) for e in self.skewed_experts))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.mode not in (MODE_FIXED, MODE_RESAMPLE_UNIFORM):
            raise ValueError(f"unknown per-batch mode {self.mode!r}")
        if not 0.0 <= self.resample_lo <= self.resample_hi <= 1.0:
            raise ValueError("resample bounds must satisfy 0 <= lo <= hi <= 1")
        if len(set(self.skewed_experts)) != len(self.skewed_experts):
            raise ValueError("skewed expert indices must be distinct")
        if any(e < 0 for e in self.skewed_experts):
            raise ValueError("skewed expert indices must be non-negative")
        max_alpha = self.resample_hi if self.mode == MODE_RESAMPLE_UNIFORM else self.alpha
        if max_alpha > 0 and not self.skewed_experts:
            raise ValueError("skewed_experts must be non-empty when alpha can exceed 0")


@dataclass(frozen=True)
class WorkloadSpec:
    """Driver configuration for one synthetic experiment."""

    num_batches: int
    tokens_per_gpu_per_batch: int
    skew: SkewSpec
    seed: int

    def __post_init__(self):
        if self.num_batches < 1:
            raise ValueError("num_batches must be >= 1")
        if self.tokens_per_gpu_per_batch < 1:
            raise ValueError("tokens_per_gpu_per_batch must be >= 1")


@dataclass
class TraceBatch:
    batch_id: int
    alpha: float
    layers: list[RoutingMatrix]


@dataclass
class Trace:
    """A replayable sequence of routing decisions.

    Each batch holds one RoutingMatrix per model layer; all matrices within
    a batch have identical row sums (the same tokens flow through every
    layer). Dimensions are constant across the trace.
    """

    num_gpus: int
    num_experts: int
    num_layers: int
    rng_name: str = RNG_NAME
    seed: int = 0
    batches: list[TraceBatch] = field(default_factory=list)

    @property
    def num_batches(self) -> int:
        return len(self.batches)

    def tokens_per_batch(self) -> int:
        if not self.batches:
            return 0
        return int(self.batches[0].layers[0].counts.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        if (self.num_gpus, self.num_experts, self.num_layers, self.rng_name, self.seed) != (
            other.num_gpus,
            other.num_experts,
            other.num_layers,
            other.rng_name,
            other.seed,
        ):
            return False
        if len(self.batches) != len(other.batches):
            return False
        for a, b in zip(self.batches, other.batches):
            if a.batch_id != b.batch_id or a.alpha != b.alpha or a.layers != b.layers:
                return False
        return True


def skew_probabilities(alpha: float, skewed, num_experts: int) -> np.ndarray:
    """Per-expert routing probabilities for a given skew level.

    The skewed experts each receive ``alpha / len(skewed)``; every other
    expert receives ``(1 - alpha) / (E - len(skewed))``. Zero skew means
    plain uniform routing (the hot set is not excluded), and if all experts
    are skewed the distribution is uniform regardless of alpha.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    skewed = [int(e) for e in skewed]
    if len(set(skewed)) != len(skewed):
        raise ValueError("skewed expert indices must be distinct")
    if any(not 0 <= e < num_experts for e in skewed):
        raise ValueError("skewed expert index out of range")
    if not skewed and alpha > 0:
        raise ValueError("skewed experts required when alpha > 0")
    if len(skewed) > num_experts:
        raise ValueError("more skewed experts than experts")

    probs = np.empty(num_experts, dtype=np.float64)
    if alpha == 0.0 or len(skewed) == num_experts:
        probs.fill(1.0 / num_experts)
        return probs
    probs.fill((1.0 - alpha) / (num_experts - len(skewed)))
    probs[skewed] = alpha / len(skewed)
    return probs


def sample_routing(
    probs: np.ndarray, tokens_per_gpu: int, num_gpus: int, rng: np.random.Generator
) -> RoutingMatrix:
    """Draw one routing matrix: each row is an independent multinomial.

    Row sums equal ``tokens_per_gpu`` exactly, and the draw is fully
    determined by the generator state.
    """
    probs = np.asarray(probs, dtype=np.float64)
    total = probs.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"probabilities must sum to 1, got {total}")
    counts = rng.multinomial(tokens_per_gpu, probs / total, size=num_gpus)
    return RoutingMatrix(counts)


def generate_trace(spec: WorkloadSpec, model: ModelSpec, num_gpus: int) -> Trace:
    """Sample a full trace: num_batches batches of num_layers routing matrices.

    Layers are sampled independently from the batch's skew distribution
    (inter-layer affinity is deliberately not modeled). Bit-identical output
    for identical (spec, model, num_gpus).
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    batches = []
    for b in range(spec.num_batches):
        if spec.skew.mode == MODE_RESAMPLE_UNIFORM:
            alpha = float(rng.uniform(spec.skew.resample_lo, spec.skew.resample_hi))
        else:
            alpha = spec.skew.alpha
        probs = skew_probabilities(alpha, spec.skew.skewed_experts, model.num_experts)
        layers = [
            sample_routing(probs, spec.tokens_per_gpu_per_batch, num_gpus, rng)
            for _ in range(model.num_layers)
        ]
        batches.append(TraceBatch(batch_id=b, alpha=alpha, layers=layers))
    return Trace(
        num_gpus=num_gpus,
        num_experts=model.num_experts,
        num_layers=model.num_layers,
        rng_name=RNG_NAME,
        seed=spec.seed,
        batches=batches,
    )


def write_trace(trace: Trace, path) -> None:
    """Write a trace as line-delimited JSON: one header line, one line per batch."""
    header = {
        "version": TRACE_VERSION,
        "kind": "trace",
        "num_gpus": trace.num_gpus,
        "num_experts": trace.num_experts,
        "num_layers": trace.num_layers,
        "rng": trace.rng_name,
        "seed": trace.seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for batch in trace.batches:
            record = {
                "batch_id": batch.batch_id,
                "alpha_used": batch.alpha,
                "layers": [m.counts.tolist() for m in batch.layers],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _require(condition: bool, line_no: int, message: str) -> None:
    if not condition:
        raise TraceParseError(line_no, message)


def read_trace(path) -> Trace:
    """Parse a trace file written by :func:`write_trace`.

    Raises :class:`TraceParseError` naming the offending line for any
    structural problem: bad JSON, dimension mismatches, negative counts, or
    inconsistent row sums across a batch's layers.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise TraceParseError(1, "empty file, expected a trace header")

    def parse_json(line_no: int, text: str):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise TraceParseError(line_no, f"invalid JSON ({exc.msg})") from exc

    header = parse_json(1, lines[0])
    _require(isinstance(header, dict), 1, "header must be a JSON object")
    for key in ("version", "num_gpus", "num_experts", "num_layers", "rng", "seed"):
        _require(key in header, 1, f"header missing {key!r}")
    _require(header["version"] == TRACE_VERSION, 1, f"unsupported trace version {header['version']}")
    num_gpus = int(header["num_gpus"])
    num_experts = int(header["num_experts"])
    num_layers = int(header["num_layers"])
    _require(num_gpus >= 1 and num_experts >= 1 and num_layers >= 1, 1, "header dimensions must be positive")

    batches = []
    for idx, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        record = parse_json(idx, text)
        _require(isinstance(record, dict), idx, "batch record must be a JSON object")
        for key in ("batch_id", "alpha_used", "layers"):
            _require(key in record, idx, f"batch record missing {key!r}")
        layers_raw = record["layers"]
        _require(
            isinstance(layers_raw, list) and len(layers_raw) == num_layers,
            idx,
            f"expected {num_layers} layers, got {len(layers_raw) if isinstance(layers_raw, list) else 'non-list'}",
        )
        layers = []
        row_sums = None
        for li, matrix in enumerate(layers_raw):
            _require(
                isinstance(matrix, list) and len(matrix) == num_gpus,
                idx,
                f"layer {li}: expected {num_gpus} rows",
            )
            for row in matrix:
                _require(
                    isinstance(row, list) and len(row) == num_experts,
                    idx,
                    f"layer {li}: expected {num_experts} columns per row",
                )
                for v in row:
                    _require(isinstance(v, int), idx, f"layer {li}: counts must be integers")
                    _require(v >= 0, idx, f"layer {li}: negative token count {v}")
            rm = RoutingMatrix(matrix)
            sums = rm.row_sums()
            if row_sums is None:
                row_sums = sums
            else:
                _require(
                    bool(np.array_equal(sums, row_sums)),
                    idx,
                    f"layer {li}: row sums differ from earlier layers in this batch",
                )
            layers.append(rm)
        batches.append(
            TraceBatch(batch_id=int(record["batch_id"]), alpha=float(record["alpha_used"]), layers=layers)
        )

    return Trace(
        num_gpus=num_gpus,
        num_experts=num_experts,
        num_layers=num_layers,
        rng_name=str(header["rng"]),
        seed=int(header["seed"]),
        batches=batches,
    )
