import numpy as np
import pytest

from moesim import (
    Placement,
    PopularityProfile,
    RoutingMatrix,
    ScheduleTensor,
    affinity_placement,
    blocked_placement,
    estimate_token_threshold,
    even_split_assign,
    initial_assign,
    load_per_gpu,
    rebalance,
    rebalance_with_stats,
    round_robin_placement,
    total_tokens,
    validate_against,
)
from moesim.policies import SchedulerConfig, threshold_bound

FIG_M_ALL = RoutingMatrix([[1, 1, 3], [1, 1, 3], [0, 2, 3]])
FIG_PLACEMENT = Placement(home=(0, 1, 2), num_gpus=3)


def random_instance(rng, max_gpus=6, max_experts=12, max_tokens=2000):
    g = int(rng.integers(1, max_gpus + 1))
    e = int(rng.integers(1, max_experts + 1))
    if rng.random() < 0.5:
        # skewed: most tokens on few experts
        probs = rng.dirichlet(np.full(e, 0.3))
    else:
        probs = np.full(e, 1.0 / e)
    tokens = int(rng.integers(0, max_tokens // g + 1))
    m = RoutingMatrix(rng.multinomial(tokens, probs, size=g))
    placement = Placement(home=tuple(int(x) for x in rng.integers(0, g, size=e)), num_gpus=g)
    q = int(rng.choice([1, 1, 2, 5, 20, 100]))
    return m, placement, q


class TestPlacements:
    def test_round_robin_small(self):
        assert round_robin_placement(3, 3).home == (0, 1, 2)

    def test_round_robin_switch_shape(self):
        p = round_robin_placement(128, 8)
        assert p.homes_on(0) == tuple(range(0, 128, 8))
        assert len(p.homes_on(0)) == 16

    def test_round_robin_fewer_experts_than_gpus(self):
        p = round_robin_placement(2, 4)
        assert p.home == (0, 1)
        assert p.homes_on(2) == () and p.homes_on(3) == ()

    def test_blocked_switch_shape(self):
        p = blocked_placement(128, 8)
        assert p.homes_on(0) == tuple(range(16))
        assert p.homes_on(7) == tuple(range(112, 128))

    def test_blocked_small(self):
        assert blocked_placement(3, 3).home == (0, 1, 2)
        assert blocked_placement(4, 2).home == (0, 0, 1, 1)

    def test_blocked_clamps_last_gpu(self):
        # E=5, G=3: block=2, expert 4 would index GPU 2 anyway
        assert blocked_placement(5, 3).home == (0, 0, 1, 1, 2)


class TestInitialAssign:
    def test_example_loads(self):
        s = initial_assign(FIG_M_ALL, FIG_PLACEMENT)
        assert load_per_gpu(s).tolist() == [2, 4, 9]
        assert validate_against(s, FIG_M_ALL)

    def test_zero_matrix(self):
        m = RoutingMatrix(np.zeros((2, 3), dtype=np.int64))
        s = initial_assign(m, Placement(home=(0, 1, 0), num_gpus=2))
        assert total_tokens(s) == 0

    def test_single_expert_fiber(self):
        m = RoutingMatrix([[0, 9], [0, 4]])
        s = initial_assign(m, Placement(home=(0, 1), num_gpus=2))
        nz = np.nonzero(s.counts)
        assert set(zip(*[x.tolist() for x in nz])) == {(0, 1, 1), (1, 1, 1)}


class TestRebalance:
    def test_fig_hand_trace_exact(self):
        s0 = initial_assign(FIG_M_ALL, FIG_PLACEMENT)
        s1 = rebalance(s0, 1)
        assert load_per_gpu(s1).tolist() == [5, 5, 5]
        expect = np.zeros((3, 3, 3), dtype=np.int64)
        expect[0, 0, 0] = 1
        expect[0, 1, 1] = 1
        expect[0, 2, 0] = 3  # first move: 3 tokens of expert 2, source 0 -> GPU 0
        expect[1, 0, 0] = 1
        expect[1, 1, 1] = 1
        expect[1, 2, 1] = 1  # second move: 1 token of expert 2, source 1 -> GPU 1
        expect[1, 2, 2] = 2
        expect[2, 1, 1] = 2
        expect[2, 2, 2] = 3
        assert np.array_equal(s1.counts, expect)

    def test_balanced_schedule_unchanged(self):
        counts = np.zeros((2, 2, 2), dtype=np.int64)
        counts[0, 0, 0] = 4
        counts[1, 1, 1] = 4
        s = ScheduleTensor(counts)
        assert rebalance(s, 1) == s

    def test_huge_q_is_noop(self):
        s0 = initial_assign(FIG_M_ALL, FIG_PLACEMENT)
        assert rebalance(s0, total_tokens(s0) + 1) == s0

    def test_q_below_one_rejected(self):
        with pytest.raises(ValueError):
            rebalance(initial_assign(FIG_M_ALL, FIG_PLACEMENT), 0)

    def test_input_not_mutated(self):
        s0 = initial_assign(FIG_M_ALL, FIG_PLACEMENT)
        before = s0.counts.copy()
        rebalance(s0, 1)
        assert np.array_equal(s0.counts, before)

    def test_invariants_on_random_instances(self):
        rng = np.random.default_rng(20250101)
        for _ in range(300):
            m, placement, q = random_instance(rng)
            s0 = initial_assign(m, placement)
            loads0 = load_per_gpu(s0)
            t_avg = total_tokens(s0) // m.num_gpus
            s1, iters = rebalance_with_stats(s0, q)
            loads1 = load_per_gpu(s1)
            # conservation
            assert validate_against(s1, m)
            # monotone max
            assert loads1.max(initial=0) <= loads0.max(initial=0)
            # receiver cap: any GPU whose load grew ends <= floor average
            grew = loads1 > loads0
            assert np.all(loads1[grew] <= t_avg)
            # iteration bound
            assert iters <= int(np.maximum(loads0 - t_avg, 0).sum())
            # idempotence at fixpoint
            s2 = rebalance(s1, q)
            assert s2 == s1


class TestEvenSplit:
    def test_divisible_tokens(self):
        m = RoutingMatrix([[8]] + [[0]] * 3)
        s = even_split_assign(m, 4)
        assert s.counts[0, 0, :].tolist() == [2, 2, 2, 2]

    def test_remainder_to_lowest_index(self):
        m = RoutingMatrix([[5], [0], [0], [0]])
        s = even_split_assign(m, 4)
        assert s.counts.sum(axis=(0, 1)).tolist() == [2, 1, 1, 1]

    def test_zero_matrix(self):
        m = RoutingMatrix(np.zeros((3, 2), dtype=np.int64))
        assert total_tokens(even_split_assign(m, 3)) == 0

    def test_conservation_and_balance_random(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            g = int(rng.integers(1, 7))
            e = int(rng.integers(1, 10))
            m = RoutingMatrix(rng.integers(0, 60, size=(g, e)))
            s = even_split_assign(m, g)
            assert validate_against(s, m)
            loads = load_per_gpu(s)
            assert int(loads.max() - loads.min()) <= e

    def test_per_expert_split_even(self):
        rng = np.random.default_rng(13)
        m = RoutingMatrix(rng.integers(0, 25, size=(4, 5)))
        s = even_split_assign(m, 4)
        per_expert_dest = s.counts.sum(axis=0)  # [expert, gpu]
        for e in range(5):
            spread = per_expert_dest[e].max() - per_expert_dest[e].min()
            assert spread <= 1


class TestAffinityPlacement:
    def test_lpt_three_experts(self):
        profile = PopularityProfile(counts=[9, 4, 2], window_batches=1)
        assert affinity_placement(profile, 3, 1).home == (0, 1, 2)

    def test_lpt_two_gpus_two_slots(self):
        profile = PopularityProfile(counts=[9, 4, 2, 1], window_batches=1)
        placement = affinity_placement(profile, 2, 2)
        assert placement.home == (0, 1, 1, 0)

    def test_uniform_popularity(self):
        profile = PopularityProfile(counts=[5, 5, 5], window_batches=1)
        placement = affinity_placement(profile, 3, 2)
        assert placement.home_counts().tolist() == [1, 1, 1]

    def test_infeasible_raises(self):
        profile = PopularityProfile(counts=[1, 1, 1, 1, 1], window_batches=1)
        with pytest.raises(ValueError, match="infeasible"):
            affinity_placement(profile, 2, 2)


class TestTokenThreshold:
    def test_known_values(self):
        assert estimate_token_threshold(14e12, 2, 16e9) == 876
        assert threshold_bound(14e12, 2, 16e9) == pytest.approx(875.0)

    def test_boundary_exact_bound(self):
        # flops * dtype == 2 * bandwidth: bound exactly 1, strict inequality gives 2
        assert estimate_token_threshold(32e9, 2, 32e9) == 2

    def test_fractional_bound(self):
        assert estimate_token_threshold(1e12, 4, 32e9) == 64

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            estimate_token_threshold(0, 2, 1e9)
        with pytest.raises(ValueError):
            estimate_token_threshold(1e12, -2, 1e9)
        with pytest.raises(ValueError):
            estimate_token_threshold(1e12, 2, 0)


def test_scheduler_config_validation():
    with pytest.raises(ValueError):
        SchedulerConfig(token_threshold_q=0)
    with pytest.raises(ValueError):
        SchedulerConfig(token_threshold_q=1, affinity_refresh_batches=0)
    cfg = SchedulerConfig(token_threshold_q=5, policy="round_robin", placement="blocked")
    assert cfg.policy.value == "round_robin"
    assert cfg.placement.value == "blocked"
