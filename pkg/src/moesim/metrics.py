"""Run-level statistics and machine-readable report emission.

Throughput is total tokens processed over the experiment divided by the
experiment duration; mean TTFT is the average batch forward latency (one
forward pass per batch, so batch latency is the first-token latency).
Variance is the population variance over per-batch throughputs, a
descriptive statistic of the whole run.

Reports are emitted both as a summary JSON object and as long-form CSV
tables (one row per batch; one row per GPU/layer/category for the time
breakdown; one row per ECDF point) so figures can be rebuilt with any
plotting tool.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SUMMARY_FILE = "summary.json"
BATCHES_FILE = "batches.csv"
BREAKDOWN_FILE = "breakdown.csv"
ECDF_FILE = "ecdf.csv"


@dataclass
class RunMetrics:
    """Aggregated outcome of one simulated run.

    ``per_layer_breakdown`` maps (layer, gpu, category) to seconds summed
    over batches. ``per_gpu_token_loads`` holds one per-GPU load vector per
    simulated layer instance, in trace order.
    """

    total_tokens: int
    duration: float
    per_batch_latency: list[float]
    per_batch_throughput: list[float]
    per_batch_alpha: list[float] = field(default_factory=list)
    expert_swaps_per_batch: list[int] = field(default_factory=list)
    per_layer_breakdown: dict[tuple[int, int, str], float] = field(default_factory=dict)
    per_gpu_token_loads: list[np.ndarray] = field(default_factory=list)
    per_expert_tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    per_gpu_wait_seconds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    per_gpu_span_seconds: np.ndarray = field(default_factory=lambda: np.zeros(0))


def throughput(m: RunMetrics) -> float:
    """Tokens per second over the whole experiment."""
    if m.duration <= 0:
        raise ValueError("duration must be positive")
    return m.total_tokens / m.duration


def mean_ttft(m: RunMetrics) -> float:
    """Mean batch forward latency, the stand-in for time-to-first-token."""
    if not m.per_batch_latency:
        raise ValueError("no batches recorded")
    return float(np.mean(m.per_batch_latency))


def throughput_variance(m: RunMetrics) -> float:
    """Population variance of per-batch throughput, in (tokens/s)^2."""
    if len(m.per_batch_throughput) < 2:
        raise ValueError("throughput variance needs at least 2 batches")
    return float(np.var(m.per_batch_throughput))


def load_ecdf(loads) -> list[tuple[float, float]]:
    """Empirical CDF of a load sample as sorted (value, cumulative fraction) pairs."""
    arr = np.asarray(loads, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("cannot build an ECDF from an empty sample")
    values, counts = np.unique(arr, return_counts=True)
    fractions = np.cumsum(counts) / arr.size
    return [(float(v), float(f)) for v, f in zip(values, fractions)]


def wait_fraction(timelines, gpu: int) -> float:
    """Fraction of a GPU's layer spans spent waiting, over the given timelines.

    ``timelines`` is any iterable of per-layer GPU timelines (duck-typed:
    objects with ``gpu`` and ``events``); entries for other GPUs are
    ignored. The span of each timeline excludes asynchronous fetches, which
    overlap other work by design.
    """
    total_wait = 0.0
    total_span = 0.0
    seen = False
    for tl in timelines:
        if tl.gpu != gpu:
            continue
        seen = True
        span_end = 0.0
        for ev in tl.events:
            if ev.category == "expert_load_async":
                continue
            span_end = max(span_end, ev.start + ev.duration)
            if ev.category == "wait":
                total_wait += ev.duration
        total_span += span_end
    if not seen:
        raise ValueError(f"no timelines for GPU {gpu}")
    if total_span <= 0:
        raise ValueError(f"GPU {gpu} has zero span")
    return total_wait / total_span


def run_wait_fractions(m: RunMetrics) -> np.ndarray:
    """Per-GPU wait fraction aggregated over an entire run."""
    spans = np.asarray(m.per_gpu_span_seconds, dtype=np.float64)
    if spans.size == 0 or np.any(spans <= 0):
        raise ValueError("run has GPUs with zero span")
    return np.asarray(m.per_gpu_wait_seconds, dtype=np.float64) / spans


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_reports(
    m: RunMetrics,
    config_echo: dict,
    out_dir,
    wall_clock_s: float | None = None,
) -> dict[str, Path]:
    """Write summary.json, batches.csv, breakdown.csv, and ecdf.csv.

    Output is byte-deterministic for identical metrics; the only
    non-deterministic field is ``wall_clock_s`` in summary.json, which
    callers comparing runs should exclude.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    summary = {
        "config": config_echo,
        "total_tokens": m.total_tokens,
        "duration_s": m.duration,
        "num_batches": len(m.per_batch_latency),
        "throughput_tok_s": throughput(m),
        "mean_ttft_s": mean_ttft(m),
        "throughput_variance": throughput_variance(m) if len(m.per_batch_throughput) >= 2 else None,
        "per_gpu_wait_fraction": [float(x) for x in run_wait_fractions(m)],
        "expert_swaps_total": int(sum(m.expert_swaps_per_batch)),
        "notes": {
            "ttft_definition": "batch forward latency (single forward pass per batch)",
            "execution_order": "resident experts by descending tokens, then fetched experts by descending tokens",
        },
        "wall_clock_s": wall_clock_s,
    }
    summary_path = out_dir / SUMMARY_FILE
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    batches_path = out_dir / BATCHES_FILE
    with open(batches_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch_id", "alpha", "latency_s", "throughput_tok_s", "expert_swaps"])
        for i, latency in enumerate(m.per_batch_latency):
            writer.writerow(
                [
                    i,
                    _fmt(m.per_batch_alpha[i] if m.per_batch_alpha else ""),
                    _fmt(latency),
                    _fmt(m.per_batch_throughput[i]),
                    m.expert_swaps_per_batch[i] if m.expert_swaps_per_batch else "",
                ]
            )

    breakdown_path = out_dir / BREAKDOWN_FILE
    with open(breakdown_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "gpu", "category", "seconds"])
        for (layer, gpu, category), seconds in sorted(m.per_layer_breakdown.items()):
            writer.writerow([layer, gpu, category, _fmt(seconds)])

    ecdf_path = out_dir / ECDF_FILE
    with open(ecdf_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series", "value", "fraction"])
        if m.per_gpu_token_loads:
            pooled = np.concatenate([np.asarray(v).ravel() for v in m.per_gpu_token_loads])
            for value, fraction in load_ecdf(pooled):
                writer.writerow(["per_gpu_load", _fmt(value), _fmt(fraction)])
        if m.per_expert_tokens.size:
            for value, fraction in load_ecdf(m.per_expert_tokens):
                writer.writerow(["per_expert_tokens", _fmt(value), _fmt(fraction)])

    return {
        "summary": summary_path,
        "batches": batches_path,
        "breakdown": breakdown_path,
        "ecdf": ecdf_path,
    }
