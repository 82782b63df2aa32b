"""Run configuration: YAML schema, strict validation, and config echo.

The config file is a single nested key-value document. Unknown keys are
hard errors so typos never silently fall back to defaults, and every
validation message names the offending field path (e.g.
``workload.skew.alpha``).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from moesim.core import ClusterSpec, ModelSpec
from moesim.engine import SimFlags
from moesim.policies import (
    PlacementKind,
    SchedulerConfig,
    SchedulingPolicy,
    estimate_token_threshold,
)
from moesim.presets import MODEL_PRESETS, model_preset
from moesim.workload import (
    MODE_FIXED,
    MODE_RESAMPLE_UNIFORM,
    SkewSpec,
    WorkloadSpec,
)

OUTPUT_DIR_ENV = "MOESIM_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.field_path = path


@dataclass(frozen=True)
class RunConfig:
    cluster: ClusterSpec
    model: ModelSpec
    scheduler: SchedulerConfig
    flags: SimFlags
    output_dir: Path
    workload: WorkloadSpec | None = None
    trace_path: Path | None = None
    model_preset: str | None = None
    metadata_time: float | None = None

    def __post_init__(self):
        if (self.workload is None) == (self.trace_path is None):
            raise ConfigError("workload", "exactly one of workload and trace_path must be set")


def _require_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
    return value


def _check_keys(section: dict, allowed, path: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{path}.{key}" if path else key, "unknown key")


def _get(section: dict, key: str, path: str, required: bool = True, default=None):
    if key not in section:
        if required:
            raise ConfigError(f"{path}.{key}" if path else key, "missing required key")
        return default
    return section[key]


def _as_float(value, path: str) -> float:
    if isinstance(value, bool):
        raise ConfigError(path, "expected a number, got a boolean")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(path, f"expected a number, got {value!r}") from None
    raise ConfigError(path, f"expected a number, got {type(value).__name__}")


def _as_int(value, path: str) -> int:
    if isinstance(value, bool):
        raise ConfigError(path, "expected an integer, got a boolean")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        try:
            return int(value, 0)
        except ValueError:
            raise ConfigError(path, f"expected an integer, got {value!r}") from None
    raise ConfigError(path, f"expected an integer, got {type(value).__name__}")


def _as_bool(value, path: str) -> bool:
    if isinstance(value, bool):
        return value
    raise ConfigError(path, f"expected a boolean, got {type(value).__name__}")


def _wrap(path: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from exc


def _parse_cluster(section, path: str) -> ClusterSpec:
    section = _require_mapping(section, path)
    keys = (
        "num_gpus",
        "expert_slots_per_gpu",
        "link_bandwidth",
        "link_latency",
        "pcie_bandwidth",
        "gpu_flops",
    )
    _check_keys(section, keys, path)
    return _wrap(
        path,
        ClusterSpec,
        num_gpus=_as_int(_get(section, "num_gpus", path), f"{path}.num_gpus"),
        expert_slots_per_gpu=_as_int(
            _get(section, "expert_slots_per_gpu", path), f"{path}.expert_slots_per_gpu"
        ),
        link_bandwidth=_as_float(_get(section, "link_bandwidth", path), f"{path}.link_bandwidth"),
        link_latency=_as_float(_get(section, "link_latency", path), f"{path}.link_latency"),
        pcie_bandwidth=_as_float(_get(section, "pcie_bandwidth", path), f"{path}.pcie_bandwidth"),
        gpu_flops=_as_float(_get(section, "gpu_flops", path), f"{path}.gpu_flops"),
    )


def _parse_model(section, path: str) -> tuple[ModelSpec, str | None]:
    if isinstance(section, str):
        if section not in MODEL_PRESETS:
            raise ConfigError(path, f"unknown preset {section!r} (known: {', '.join(sorted(MODEL_PRESETS))})")
        return model_preset(section), section
    section = _require_mapping(section, path)
    keys = ("num_layers", "num_experts", "d_model", "d_ff", "dtype_bytes", "non_moe_layer_time", "preset")
    _check_keys(section, keys, path)
    preset = _get(section, "preset", path, required=False)
    spec = _wrap(
        path,
        ModelSpec,
        num_layers=_as_int(_get(section, "num_layers", path), f"{path}.num_layers"),
        num_experts=_as_int(_get(section, "num_experts", path), f"{path}.num_experts"),
        d_model=_as_int(_get(section, "d_model", path), f"{path}.d_model"),
        d_ff=_as_int(_get(section, "d_ff", path), f"{path}.d_ff"),
        dtype_bytes=_as_int(_get(section, "dtype_bytes", path), f"{path}.dtype_bytes"),
        non_moe_layer_time=_as_float(
            _get(section, "non_moe_layer_time", path, required=False, default=0.0),
            f"{path}.non_moe_layer_time",
        ),
    )
    return spec, (str(preset) if preset is not None else None)


def _parse_scheduler(section, path: str, cluster: ClusterSpec, model: ModelSpec) -> SchedulerConfig:
    section = _require_mapping(section, path)
    keys = ("policy", "token_threshold_q", "placement", "affinity_refresh_batches")
    _check_keys(section, keys, path)
    policy_raw = _get(section, "policy", path, required=False, default="rebalance")
    try:
        policy = SchedulingPolicy(policy_raw)
    except ValueError:
        known = ", ".join(p.value for p in SchedulingPolicy)
        raise ConfigError(f"{path}.policy", f"unknown policy {policy_raw!r} (known: {known})") from None
    placement_raw = _get(section, "placement", path, required=False, default="round_robin")
    try:
        placement = PlacementKind(placement_raw)
    except ValueError:
        known = ", ".join(p.value for p in PlacementKind)
        raise ConfigError(f"{path}.placement", f"unknown placement {placement_raw!r} (known: {known})") from None

    q_raw = _get(section, "token_threshold_q", path, required=False, default="auto")
    if isinstance(q_raw, str) and q_raw == "auto":
        q = estimate_token_threshold(cluster.gpu_flops, model.dtype_bytes, cluster.pcie_bandwidth)
    else:
        q = _as_int(q_raw, f"{path}.token_threshold_q")

    refresh = _get(section, "affinity_refresh_batches", path, required=False)
    refresh = None if refresh is None else _as_int(refresh, f"{path}.affinity_refresh_batches")
    return _wrap(
        path,
        SchedulerConfig,
        token_threshold_q=q,
        policy=policy,
        placement=placement,
        affinity_refresh_batches=refresh,
    )


def _parse_flags(section, path: str) -> SimFlags:
    if section is None:
        return SimFlags()
    section = _require_mapping(section, path)
    keys = ("rebalancing_enabled", "async_loading_enabled", "include_scheduler_walltime")
    _check_keys(section, keys, path)
    return SimFlags(
        rebalancing_enabled=_as_bool(
            _get(section, "rebalancing_enabled", path, required=False, default=True),
            f"{path}.rebalancing_enabled",
        ),
        async_loading_enabled=_as_bool(
            _get(section, "async_loading_enabled", path, required=False, default=True),
            f"{path}.async_loading_enabled",
        ),
        include_scheduler_walltime=_as_bool(
            _get(section, "include_scheduler_walltime", path, required=False, default=False),
            f"{path}.include_scheduler_walltime",
        ),
    )


def _parse_skew(section, path: str) -> SkewSpec:
    section = _require_mapping(section, path)
    keys = ("alpha", "skewed_experts", "per_batch_mode")
    _check_keys(section, keys, path)
    alpha = _as_float(_get(section, "alpha", path), f"{path}.alpha")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"{path}.alpha", f"must be in [0, 1], got {alpha}")
    skewed = _get(section, "skewed_experts", path, required=False, default=[0])
    if not isinstance(skewed, list):
        raise ConfigError(f"{path}.skewed_experts", "expected a list of expert indices")
    skewed = tuple(_as_int(v, f"{path}.skewed_experts") for v in skewed)

    mode_raw = _get(section, "per_batch_mode", path, required=False, default=MODE_FIXED)
    mode, lo, hi = MODE_FIXED, 0.0, 0.0
    if isinstance(mode_raw, str):
        if mode_raw != MODE_FIXED:
            raise ConfigError(
                f"{path}.per_batch_mode",
                f"expected 'fixed' or a {{{MODE_RESAMPLE_UNIFORM}: [lo, hi]}} mapping, got {mode_raw!r}",
            )
    else:
        mode_map = _require_mapping(mode_raw, f"{path}.per_batch_mode")
        _check_keys(mode_map, (MODE_RESAMPLE_UNIFORM,), f"{path}.per_batch_mode")
        bounds = _get(mode_map, MODE_RESAMPLE_UNIFORM, f"{path}.per_batch_mode")
        if not isinstance(bounds, list) or len(bounds) != 2:
            raise ConfigError(f"{path}.per_batch_mode.{MODE_RESAMPLE_UNIFORM}", "expected [lo, hi]")
        mode = MODE_RESAMPLE_UNIFORM
        lo = _as_float(bounds[0], f"{path}.per_batch_mode.{MODE_RESAMPLE_UNIFORM}")
        hi = _as_float(bounds[1], f"{path}.per_batch_mode.{MODE_RESAMPLE_UNIFORM}")
    return _wrap(
        path, SkewSpec, alpha=alpha, skewed_experts=skewed, mode=mode, resample_lo=lo, resample_hi=hi
    )


def _parse_workload(section, path: str) -> WorkloadSpec:
    section = _require_mapping(section, path)
    keys = ("num_batches", "tokens_per_gpu_per_batch", "seed", "skew")
    _check_keys(section, keys, path)
    return _wrap(
        path,
        WorkloadSpec,
        num_batches=_as_int(_get(section, "num_batches", path), f"{path}.num_batches"),
        tokens_per_gpu_per_batch=_as_int(
            _get(section, "tokens_per_gpu_per_batch", path), f"{path}.tokens_per_gpu_per_batch"
        ),
        skew=_parse_skew(_get(section, "skew", path), f"{path}.skew"),
        seed=_as_int(_get(section, "seed", path, required=False, default=0), f"{path}.seed"),
    )


def parse_run_config(raw: dict, default_output_dir: str | None = None) -> RunConfig:
    raw = _require_mapping(raw, "")
    keys = ("cluster", "model", "scheduler", "flags", "workload", "trace_path", "output_dir", "metadata_time")
    _check_keys(raw, keys, "")

    cluster = _parse_cluster(_get(raw, "cluster", ""), "cluster")
    model, preset = _parse_model(_get(raw, "model", ""), "model")
    scheduler = _parse_scheduler(_get(raw, "scheduler", "", required=False, default={}), "scheduler", cluster, model)
    flags = _parse_flags(raw.get("flags"), "flags")

    workload = None
    trace_path = None
    if "workload" in raw and "trace_path" in raw:
        raise ConfigError("workload", "workload and trace_path are mutually exclusive")
    if "workload" in raw:
        workload = _parse_workload(raw["workload"], "workload")
        if workload.skew.skewed_experts and max(workload.skew.skewed_experts) >= model.num_experts:
            raise ConfigError("workload.skew.skewed_experts", "expert index out of range for model")
    elif "trace_path" in raw:
        trace_path = Path(str(raw["trace_path"]))
    else:
        raise ConfigError("workload", "one of workload or trace_path is required")

    out_raw = raw.get("output_dir", default_output_dir)
    if out_raw is None:
        raise ConfigError("output_dir", "missing required key (or set the output-dir environment variable)")
    metadata_time = raw.get("metadata_time")
    if metadata_time is not None:
        metadata_time = _as_float(metadata_time, "metadata_time")
        if metadata_time < 0:
            raise ConfigError("metadata_time", "must be >= 0")

    return RunConfig(
        cluster=cluster,
        model=model,
        scheduler=scheduler,
        flags=flags,
        output_dir=Path(str(out_raw)),
        workload=workload,
        trace_path=trace_path,
        model_preset=preset,
        metadata_time=metadata_time,
    )


def load_run_config(path, default_output_dir: str | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError("", f"invalid YAML: {exc}") from exc
    if raw is None:
        raise ConfigError("", "empty config file")
    return parse_run_config(raw, default_output_dir=default_output_dir)


def config_echo(config: RunConfig) -> dict:
    """Expanded, reparseable form of a RunConfig for embedding in reports."""
    echo: dict = {
        "cluster": {
            "num_gpus": config.cluster.num_gpus,
            "expert_slots_per_gpu": config.cluster.expert_slots_per_gpu,
            "link_bandwidth": config.cluster.link_bandwidth,
            "link_latency": config.cluster.link_latency,
            "pcie_bandwidth": config.cluster.pcie_bandwidth,
            "gpu_flops": config.cluster.gpu_flops,
        },
        "model": {
            "num_layers": config.model.num_layers,
            "num_experts": config.model.num_experts,
            "d_model": config.model.d_model,
            "d_ff": config.model.d_ff,
            "dtype_bytes": config.model.dtype_bytes,
            "non_moe_layer_time": config.model.non_moe_layer_time,
        },
        "scheduler": {
            "policy": config.scheduler.policy.value,
            "token_threshold_q": config.scheduler.token_threshold_q,
            "placement": config.scheduler.placement.value,
        },
        "flags": {
            "rebalancing_enabled": config.flags.rebalancing_enabled,
            "async_loading_enabled": config.flags.async_loading_enabled,
            "include_scheduler_walltime": config.flags.include_scheduler_walltime,
        },
        "output_dir": str(config.output_dir),
    }
    if config.model_preset is not None:
        echo["model"]["preset"] = config.model_preset
    if config.scheduler.affinity_refresh_batches is not None:
        echo["scheduler"]["affinity_refresh_batches"] = config.scheduler.affinity_refresh_batches
    if config.metadata_time is not None:
        echo["metadata_time"] = config.metadata_time
    if config.workload is not None:
        skew = config.workload.skew
        skew_echo: dict = {"alpha": skew.alpha, "skewed_experts": list(skew.skewed_experts)}
        if skew.mode == MODE_RESAMPLE_UNIFORM:
            skew_echo["per_batch_mode"] = {MODE_RESAMPLE_UNIFORM: [skew.resample_lo, skew.resample_hi]}
        else:
            skew_echo["per_batch_mode"] = MODE_FIXED
        echo["workload"] = {
            "num_batches": config.workload.num_batches,
            "tokens_per_gpu_per_batch": config.workload.tokens_per_gpu_per_batch,
            "seed": config.workload.seed,
            "skew": skew_echo,
        }
    else:
        echo["trace_path"] = str(config.trace_path)
    return echo
