import csv
import json

import numpy as np
import pytest

from moesim import (
    GpuTimeline,
    RunMetrics,
    TimelineEvent,
    load_ecdf,
    mean_ttft,
    throughput,
    throughput_variance,
    wait_fraction,
    write_reports,
)
from moesim.engine import EventCategory


def make_metrics(**kwargs):
    base = dict(
        total_tokens=1000,
        duration=10.0,
        per_batch_latency=[4.0, 6.0],
        per_batch_throughput=[100.0, 200.0],
        per_batch_alpha=[0.1, 0.2],
        expert_swaps_per_batch=[3, 5],
        per_layer_breakdown={(0, 0, "compute"): 1.5, (0, 1, "wait"): 0.5},
        per_gpu_token_loads=[np.array([2, 4, 9])],
        per_expert_tokens=np.array([5, 5, 5]),
        per_gpu_wait_seconds=np.array([0.0, 0.5]),
        per_gpu_span_seconds=np.array([10.0, 10.0]),
    )
    base.update(kwargs)
    return RunMetrics(**base)


class TestScalars:
    def test_throughput(self):
        assert throughput(make_metrics()) == pytest.approx(100.0)
        assert throughput(make_metrics(total_tokens=15, duration=0.075)) == pytest.approx(200.0)

    def test_throughput_identity(self):
        m = make_metrics(total_tokens=777, duration=3.21)
        assert throughput(m) * m.duration == pytest.approx(m.total_tokens, rel=1e-6)

    def test_throughput_zero_duration_rejected(self):
        with pytest.raises(ValueError):
            throughput(make_metrics(duration=0.0))

    def test_mean_ttft(self):
        assert mean_ttft(make_metrics(per_batch_latency=[0.005])) == pytest.approx(0.005)
        assert mean_ttft(make_metrics(per_batch_latency=[0.004, 0.006])) == pytest.approx(0.005)
        assert mean_ttft(make_metrics(per_batch_latency=[1.5] * 7)) == pytest.approx(1.5)

    def test_mean_ttft_empty_rejected(self):
        with pytest.raises(ValueError):
            mean_ttft(make_metrics(per_batch_latency=[]))

    def test_variance(self):
        assert throughput_variance(make_metrics(per_batch_throughput=[50.0, 50.0, 50.0])) == 0.0
        assert throughput_variance(make_metrics(per_batch_throughput=[100.0, 200.0])) == pytest.approx(2500.0)

    def test_variance_needs_two_batches(self):
        with pytest.raises(ValueError):
            throughput_variance(make_metrics(per_batch_throughput=[100.0]))


class TestEcdf:
    def test_degenerate(self):
        assert load_ecdf([5, 5, 5]) == [(5.0, 1.0)]

    def test_three_values(self):
        got = load_ecdf([2, 4, 9])
        assert got == [(2.0, pytest.approx(1 / 3)), (4.0, pytest.approx(2 / 3)), (9.0, 1.0)]

    def test_monotone_and_complete(self):
        rng = np.random.default_rng(4)
        values = rng.integers(0, 30, size=100)
        ecdf = load_ecdf(values)
        fractions = [f for _, f in ecdf]
        assert fractions == sorted(fractions)
        assert fractions[-1] == pytest.approx(1.0)
        vals = [v for v, _ in ecdf]
        assert vals == sorted(vals)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            load_ecdf([])


class TestWaitFraction:
    def timeline(self, gpu, busy, wait):
        events = [TimelineEvent(EventCategory.COMPUTE, 0.0, busy)]
        if wait:
            events.append(TimelineEvent(EventCategory.WAIT, busy, wait))
        return GpuTimeline(gpu=gpu, events=events)

    def test_half_waiting(self):
        tls = [self.timeline(0, 10.0, 0.0), self.timeline(1, 5.0, 5.0)]
        assert wait_fraction(tls, 1) == pytest.approx(0.5)
        assert wait_fraction(tls, 0) == 0.0

    def test_aggregates_layers(self):
        tls = [self.timeline(0, 8.0, 2.0), self.timeline(0, 5.0, 5.0)]
        assert wait_fraction(tls, 0) == pytest.approx(7.0 / 20.0)

    def test_async_events_excluded_from_span(self):
        events = [
            TimelineEvent(EventCategory.COMPUTE, 0.0, 4.0),
            TimelineEvent(EventCategory.EXPERT_LOAD_ASYNC, 0.0, 100.0),
        ]
        assert wait_fraction([GpuTimeline(gpu=0, events=events)], 0) == 0.0

    def test_unknown_gpu_rejected(self):
        with pytest.raises(ValueError):
            wait_fraction([self.timeline(0, 1.0, 0.0)], 3)

    def test_zero_span_rejected(self):
        with pytest.raises(ValueError):
            wait_fraction([GpuTimeline(gpu=0, events=[])], 0)


class TestReports:
    def test_files_written_and_consistent(self, tmp_path):
        m = make_metrics()
        paths = write_reports(m, {"model": {"num_experts": 3}}, tmp_path, wall_clock_s=1.23)
        assert set(paths) == {"summary", "batches", "breakdown", "ecdf"}

        summary = json.loads(paths["summary"].read_text())
        assert summary["throughput_tok_s"] == pytest.approx(100.0)
        assert summary["mean_ttft_s"] == pytest.approx(5.0)
        assert summary["throughput_variance"] == pytest.approx(2500.0)
        assert summary["per_gpu_wait_fraction"] == [0.0, 0.05]
        assert summary["config"] == {"model": {"num_experts": 3}}
        assert summary["wall_clock_s"] == 1.23

        with open(paths["batches"]) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert rows[0]["batch_id"] == "0"
        assert float(rows[1]["throughput_tok_s"]) == 200.0
        assert rows[1]["expert_swaps"] == "5"

        with open(paths["breakdown"]) as fh:
            rows = list(csv.DictReader(fh))
        assert [(r["layer"], r["gpu"], r["category"]) for r in rows] == [
            ("0", "0", "compute"),
            ("0", "1", "wait"),
        ]

        with open(paths["ecdf"]) as fh:
            rows = list(csv.DictReader(fh))
        gpu_rows = [r for r in rows if r["series"] == "per_gpu_load"]
        assert [float(r["value"]) for r in gpu_rows] == [2.0, 4.0, 9.0]
        assert float(gpu_rows[-1]["fraction"]) == 1.0
        expert_rows = [r for r in rows if r["series"] == "per_expert_tokens"]
        assert expert_rows == [{"series": "per_expert_tokens", "value": "5.0", "fraction": "1.0"}]

    def test_reports_byte_deterministic(self, tmp_path):
        m = make_metrics()
        a = tmp_path / "a"
        b = tmp_path / "b"
        write_reports(m, {"k": 1}, a)
        write_reports(m, {"k": 1}, b)
        for name in ("batches.csv", "breakdown.csv", "ecdf.csv", "summary.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_single_batch_variance_is_null(self, tmp_path):
        m = make_metrics(
            per_batch_latency=[10.0],
            per_batch_throughput=[100.0],
            per_batch_alpha=[0.0],
            expert_swaps_per_batch=[0],
        )
        paths = write_reports(m, {}, tmp_path)
        summary = json.loads(paths["summary"].read_text())
        assert summary["throughput_variance"] is None
