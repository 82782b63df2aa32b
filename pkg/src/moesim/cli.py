"""Command-line interface: run simulations, sweep parameters, manage traces.

Exit codes: 0 success, 2 usage or validation error, 3 I/O error,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from moesim import metrics as metrics_mod
from moesim.config import (
    OUTPUT_DIR_ENV,
    ConfigError,
    RunConfig,
    config_echo,
    load_run_config,
)
from moesim.engine import CostModel, simulate_run
from moesim.policies import SchedulingPolicy, estimate_token_threshold, threshold_bound
from moesim.workload import (
    SkewSpec,
    Trace,
    TraceParseError,
    generate_trace,
    read_trace,
    write_trace,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INTERNAL = 4

SWEEP_PARAMS = ("alpha", "q", "policy", "tokens_per_gpu")


class UsageError(ValueError):
    pass


def _resolve_trace(config: RunConfig) -> Trace:
    if config.workload is not None:
        return generate_trace(config.workload, config.model, config.cluster.num_gpus)
    return read_trace(config.trace_path)


def _execute(config: RunConfig, out_dir: Path) -> dict:
    trace = _resolve_trace(config)
    cost = CostModel.from_specs(config.cluster, config.model, metadata_time=config.metadata_time)
    started = time.perf_counter()
    run = simulate_run(trace, config.model, config.cluster, config.scheduler, config.flags, cost=cost)
    wall = time.perf_counter() - started
    metrics_mod.write_reports(run, config_echo(config), out_dir, wall_clock_s=wall)
    return {
        "throughput_tok_s": metrics_mod.throughput(run),
        "mean_ttft_s": metrics_mod.mean_ttft(run),
        "throughput_variance": (
            metrics_mod.throughput_variance(run) if len(run.per_batch_throughput) >= 2 else float("nan")
        ),
        "num_batches": len(run.per_batch_latency),
    }


def cmd_run(args) -> int:
    config = load_run_config(args.config, default_output_dir=os.environ.get(OUTPUT_DIR_ENV))
    out_dir = Path(args.output_dir) if args.output_dir else config.output_dir
    result = _execute(config, out_dir)
    print(
        f"run complete: {result['num_batches']} batches, "
        f"throughput {result['throughput_tok_s']:.3f} tok/s, "
        f"mean TTFT {result['mean_ttft_s'] * 1e3:.3f} ms -> {out_dir}"
    )
    return EXIT_OK


def cmd_estimate_q(args) -> int:
    if args.flops <= 0 or args.dtype_bytes <= 0 or args.pcie_bandwidth <= 0:
        raise UsageError("--flops, --dtype-bytes, and --pcie-bandwidth must be positive")
    bound = threshold_bound(args.flops, args.dtype_bytes, args.pcie_bandwidth)
    q = estimate_token_threshold(args.flops, args.dtype_bytes, args.pcie_bandwidth)
    print(f"bound {bound:g}")
    print(f"q {q}")
    return EXIT_OK


def _with_param(config: RunConfig, param: str, value: str, policy: str | None) -> RunConfig:
    from dataclasses import replace

    cfg = config
    if policy is not None:
        cfg = replace(cfg, scheduler=replace(cfg.scheduler, policy=SchedulingPolicy(policy)))
    if param == "policy":
        return replace(cfg, scheduler=replace(cfg.scheduler, policy=SchedulingPolicy(value)))
    if param == "q":
        return replace(cfg, scheduler=replace(cfg.scheduler, token_threshold_q=int(value)))
    if cfg.workload is None:
        raise UsageError(f"sweeping {param} requires a generated workload, not a trace file")
    if param == "alpha":
        alpha = float(value)
        skew = cfg.workload.skew
        new_skew = SkewSpec(alpha=alpha, skewed_experts=skew.skewed_experts, mode="fixed")
        return replace(cfg, workload=replace(cfg.workload, skew=new_skew))
    if param == "tokens_per_gpu":
        return replace(cfg, workload=replace(cfg.workload, tokens_per_gpu_per_batch=int(value)))
    raise UsageError(f"unknown sweep parameter {param!r} (known: {', '.join(SWEEP_PARAMS)})")


def _run_sweep_cell(cell) -> dict:
    policy, value, config, out_dir = cell
    result = _execute(config, Path(out_dir))
    return {
        "policy": policy,
        "value": value,
        "throughput_tok_s": result["throughput_tok_s"],
        "mean_ttft_s": result["mean_ttft_s"],
        "throughput_variance": result["throughput_variance"],
    }


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"unknown sweep parameter {args.param!r} (known: {', '.join(SWEEP_PARAMS)})")
    values = [v for v in (s.strip() for s in args.values.split(",")) if v]
    if not values:
        raise UsageError("--values must list at least one value")
    policies = None
    if args.policies:
        if args.param == "policy":
            raise UsageError("--policies cannot be combined with --param policy")
        policies = [p for p in (s.strip() for s in args.policies.split(",")) if p]
        for p in policies:
            if p not in [x.value for x in SchedulingPolicy]:
                raise UsageError(f"unknown policy {p!r}")

    config = load_run_config(args.config, default_output_dir=os.environ.get(OUTPUT_DIR_ENV))
    base_out = Path(args.output_dir) if args.output_dir else config.output_dir

    cells = []
    for policy in policies or [None]:
        for value in values:
            cell_config = _with_param(config, args.param, value, policy)
            label = cell_config.scheduler.policy.value
            out_dir = base_out / "sweep" / f"{label}__{args.param}={value}"
            cells.append((label, value, cell_config, str(out_dir)))

    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_sweep_cell, cells))
    else:
        rows = [_run_sweep_cell(cell) for cell in cells]

    rows.sort(key=lambda r: (r["policy"], str(r["value"])))
    base_out.mkdir(parents=True, exist_ok=True)
    sweep_path = base_out / "sweep.csv"
    with open(sweep_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy", "value", "throughput_tok_s", "mean_ttft_s", "throughput_variance"])
        for row in rows:
            writer.writerow(
                [
                    row["policy"],
                    row["value"],
                    repr(row["throughput_tok_s"]),
                    repr(row["mean_ttft_s"]),
                    repr(row["throughput_variance"]),
                ]
            )
    print(f"sweep complete: {len(rows)} cells -> {sweep_path}")
    return EXIT_OK


def cmd_trace_generate(args) -> int:
    config = load_run_config(args.config, default_output_dir=os.environ.get(OUTPUT_DIR_ENV))
    if config.workload is None:
        raise ConfigError("workload", "trace generation needs a workload section")
    trace = generate_trace(config.workload, config.model, config.cluster.num_gpus)
    write_trace(trace, args.out)
    print(
        f"wrote trace: {trace.num_batches} batches x {trace.num_layers} layers, "
        f"{trace.num_gpus} GPUs x {trace.num_experts} experts -> {args.out}"
    )
    return EXIT_OK


def cmd_trace_inspect(args) -> int:
    trace = read_trace(args.trace)
    print(
        f"trace: {trace.num_batches} batches, {trace.num_layers} layers, "
        f"{trace.num_gpus} GPUs, {trace.num_experts} experts, rng={trace.rng_name}, seed={trace.seed}"
    )
    if trace.batches:
        for layer in range(trace.num_layers):
            pooled = np.zeros(trace.num_experts, dtype=np.int64)
            for batch in trace.batches:
                pooled += batch.layers[layer].counts.sum(axis=0)
            total = int(pooled.sum())
            share = pooled.max() / total if total else 0.0
            print(f"layer {layer}: max expert share {share:.4f} (expert {int(pooled.argmax())})")
        alphas = ", ".join(f"{b.alpha:.4f}" for b in trace.batches)
        print(f"per-batch alpha: {alphas}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moesim",
        description="Deterministic simulator for expert-parallel MoE inference scheduling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one configuration and write reports")
    p_run.add_argument("config", help="YAML run configuration")
    p_run.add_argument("--output-dir", help="override the config's output directory")
    p_run.set_defaults(func=cmd_run)

    p_q = sub.add_parser("estimate-q", help="token threshold from hardware parameters")
    p_q.add_argument("--flops", type=float, required=True, help="GPU FLOP/s")
    p_q.add_argument("--dtype-bytes", type=float, required=True, help="bytes per weight element")
    p_q.add_argument("--pcie-bandwidth", type=float, required=True, help="host-to-GPU bytes/s")
    p_q.set_defaults(func=cmd_estimate_q)

    p_sweep = sub.add_parser("sweep", help="grid of runs over one parameter (and optionally policies)")
    p_sweep.add_argument("config", help="YAML base configuration")
    p_sweep.add_argument("--param", required=True, help=f"one of: {', '.join(SWEEP_PARAMS)}")
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--policies", help="comma-separated policies to cross with the values")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel cells")
    p_sweep.add_argument("--output-dir", help="override the config's output directory")
    p_sweep.set_defaults(func=cmd_sweep)

    p_trace = sub.add_parser("trace", help="generate or inspect trace files")
    trace_sub = p_trace.add_subparsers(dest="trace_command", required=True)
    p_gen = trace_sub.add_parser("generate", help="sample a trace from a config's workload")
    p_gen.add_argument("config", help="YAML configuration with a workload section")
    p_gen.add_argument("--out", required=True, help="trace file to write")
    p_gen.set_defaults(func=cmd_trace_generate)
    p_ins = trace_sub.add_parser("inspect", help="print dimensions and skew of a trace file")
    p_ins.add_argument("trace", help="trace file to inspect")
    p_ins.set_defaults(func=cmd_trace_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TraceParseError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
