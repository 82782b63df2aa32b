import numpy as np
import pytest

from moesim import (
    ModelSpec,
    SkewSpec,
    Trace,
    TraceParseError,
    WorkloadSpec,
    generate_trace,
    read_trace,
    sample_routing,
    skew_probabilities,
    write_trace,
)

MODEL = ModelSpec(num_layers=3, num_experts=8, d_model=64, d_ff=128, dtype_bytes=2)


def test_zero_skew_is_uniform():
    probs = skew_probabilities(0.0, [0], 4)
    assert probs.tolist() == [0.25, 0.25, 0.25, 0.25]


def test_single_hot_expert():
    probs = skew_probabilities(0.9, [0], 10)
    assert probs[0] == pytest.approx(0.9)
    np.testing.assert_allclose(probs[1:], 0.1 / 9)


def test_ten_hot_experts_of_128():
    probs = skew_probabilities(0.9, list(range(10)), 128)
    np.testing.assert_allclose(probs[:10], 0.09)
    np.testing.assert_allclose(probs[10:], 0.1 / 118)


def test_all_experts_skewed_is_uniform():
    probs = skew_probabilities(0.7, list(range(5)), 5)
    np.testing.assert_allclose(probs, 0.2)


def test_skew_probabilities_validation():
    with pytest.raises(ValueError):
        skew_probabilities(2.0, [0], 4)
    with pytest.raises(ValueError):
        skew_probabilities(0.5, [0, 0], 4)
    with pytest.raises(ValueError):
        skew_probabilities(0.5, [4], 4)
    with pytest.raises(ValueError):
        skew_probabilities(0.5, [], 4)


@pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 0.9, 0.95, 1.0])
@pytest.mark.parametrize("num_skewed", [1, 10, 32])
def test_probabilities_form_distribution(alpha, num_skewed):
    probs = skew_probabilities(alpha, list(range(num_skewed)), 32)
    assert probs.min() >= 0
    assert abs(probs.sum() - 1.0) <= 1e-12


def test_sample_routing_degenerate():
    rng = np.random.default_rng(0)
    m = sample_routing(np.array([1.0, 0.0, 0.0]), 5, 2, rng)
    assert m.counts.tolist() == [[5, 0, 0], [5, 0, 0]]


def test_sample_routing_concentration():
    # binomial, p = 0.25, n = 10000: +-250 is beyond 6 sigma
    rng = np.random.default_rng(123)
    m = sample_routing(np.full(4, 0.25), 10_000, 1, rng)
    assert m.counts.sum() == 10_000
    assert all(2250 <= c <= 2750 for c in m.counts[0].tolist())


def test_sample_routing_deterministic():
    draws = []
    for _ in range(2):
        rng = np.random.default_rng(42)
        draws.append(sample_routing(np.array([0.5, 0.5]), 4, 1, rng))
    assert draws[0] == draws[1]


def test_sample_routing_row_sums_exact():
    rng = np.random.default_rng(5)
    for _ in range(50):
        e = int(rng.integers(1, 12))
        probs = rng.dirichlet(np.ones(e))
        tokens = int(rng.integers(1, 500))
        m = sample_routing(probs, tokens, 3, rng)
        assert m.row_sums().tolist() == [tokens] * 3


def make_spec(**kwargs):
    base = dict(
        num_batches=4,
        tokens_per_gpu_per_batch=64,
        skew=SkewSpec(alpha=0.0, skewed_experts=(0,)),
        seed=7,
    )
    base.update(kwargs)
    return WorkloadSpec(**base)


def test_generate_trace_dimensions_and_determinism():
    spec = make_spec()
    t1 = generate_trace(spec, MODEL, num_gpus=2)
    t2 = generate_trace(spec, MODEL, num_gpus=2)
    assert t1 == t2
    assert t1.num_batches == 4
    assert all(len(b.layers) == MODEL.num_layers for b in t1.batches)
    assert all(m.counts.shape == (2, 8) for b in t1.batches for m in b.layers)
    assert all(m.row_sums().tolist() == [64, 64] for b in t1.batches for m in b.layers)


def test_generate_trace_resampled_alpha_reproducible():
    spec = make_spec(skew=SkewSpec(alpha=0.0, skewed_experts=(0,), mode="resample_uniform", resample_lo=0.0, resample_hi=0.5))
    t1 = generate_trace(spec, MODEL, num_gpus=2)
    t2 = generate_trace(spec, MODEL, num_gpus=2)
    assert [b.alpha for b in t1.batches] == [b.alpha for b in t2.batches]
    assert all(0.0 <= b.alpha <= 0.5 for b in t1.batches)
    # not all batches drew the same alpha
    assert len({b.alpha for b in t1.batches}) > 1


def test_generate_trace_alpha_drives_hot_share():
    spec = make_spec(
        num_batches=8,
        tokens_per_gpu_per_batch=512,
        skew=SkewSpec(alpha=0.0, skewed_experts=(0,), mode="resample_uniform", resample_lo=0.0, resample_hi=0.5),
    )
    trace = generate_trace(spec, MODEL, num_gpus=2)
    shares = [b.layers[0].counts[:, 0].sum() / (2 * 512) for b in trace.batches]
    assert max(shares) - min(shares) > 0.1  # per-batch skew visibly varies


def test_trace_round_trip(tmp_path):
    spec = make_spec(skew=SkewSpec(alpha=0.6, skewed_experts=(1, 3)))
    trace = generate_trace(spec, MODEL, num_gpus=3)
    path = tmp_path / "trace.jsonl"
    write_trace(trace, path)
    assert read_trace(path) == trace


def test_empty_trace_round_trip(tmp_path):
    trace = Trace(num_gpus=2, num_experts=4, num_layers=2, seed=1)
    path = tmp_path / "empty.jsonl"
    write_trace(trace, path)
    back = read_trace(path)
    assert back == trace
    assert back.num_batches == 0


def test_negative_count_names_line(tmp_path):
    trace = generate_trace(make_spec(num_batches=2), MODEL, num_gpus=2)
    path = tmp_path / "bad.jsonl"
    write_trace(trace, path)
    lines = path.read_text().splitlines()
    lines[2] = lines[2].replace('[[', '[[-', 1)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceParseError, match="line 3"):
        read_trace(path)


def test_truncated_layer_names_line(tmp_path):
    trace = generate_trace(make_spec(num_batches=1), MODEL, num_gpus=2)
    path = tmp_path / "short.jsonl"
    write_trace(trace, path)
    lines = path.read_text().splitlines()
    import json

    record = json.loads(lines[1])
    record["layers"] = record["layers"][:-1]
    lines[1] = json.dumps(record)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceParseError, match="line 2"):
        read_trace(path)


def test_invalid_json_names_line(tmp_path):
    path = tmp_path / "garbled.jsonl"
    path.write_text('{"version": 1, "num_gpus": 2, "num_experts": 4, "num_layers": 1, "rng": "numpy-pcg64", "seed": 0}\nnot json\n')
    with pytest.raises(TraceParseError, match="line 2"):
        read_trace(path)


def test_skew_spec_validation():
    with pytest.raises(ValueError):
        SkewSpec(alpha=1.5, skewed_experts=(0,))
    with pytest.raises(ValueError):
        SkewSpec(alpha=0.5, skewed_experts=())
    with pytest.raises(ValueError):
        SkewSpec(alpha=0.0, skewed_experts=(0,), mode="resample_uniform", resample_lo=0.5, resample_hi=0.2)
    # zero-skew with no hot experts is legal
    SkewSpec(alpha=0.0, skewed_experts=())
