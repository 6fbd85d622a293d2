import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import pdist

from twostage_ovs.design import (RngStream, _random_lhd, categorical_sample, farthest_point_subset, make_rng,
                                 maximin_lhd, maximin_lhd_mixed, sample_scenarios)
from twostage_ovs.errors import DegenerateWeights, SizeTooLarge
from twostage_ovs.problem import make_problem


def test_stream_reproducible_and_distinct():
    a = make_rng(7, 3).random(5)
    b = make_rng(7, 3).random(5)
    c = make_rng(7, 4).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_stream_object_caches_generator():
    s = RngStream(1, 2)
    assert s.generator is s.generator


def test_distinct_streams_uncorrelated():
    x = make_rng(11, 0).standard_normal(20000)
    y = make_rng(11, 1).standard_normal(20000)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.03


def test_single_point_design():
    d = maximin_lhd([301], 1, make_rng(0))
    assert d.size == 1 and d.points.shape == (1, 1)
    assert 0 <= d.points[0, 0] < 301


def test_ten_point_design_on_301_grid_one_per_block():
    d = maximin_lhd([301], 10, make_rng(5))
    idx = np.sort(d.points[:, 0])
    # blocks [ceil(30.1 k), ceil(30.1 (k+1)) - 1]
    lo = np.ceil(np.arange(10) * 30.1).astype(int)
    hi = np.ceil(np.arange(1, 11) * 30.1).astype(int) - 1
    assert np.all((idx >= lo) & (idx <= hi))


def test_two_axes_each_value_used_once():
    for seed in range(5):
        d = maximin_lhd([10, 10], 10, make_rng(seed))
        assert sorted(d.points[:, 0]) == list(range(10))
        assert sorted(d.points[:, 1]) == list(range(10))


def test_maximin_beats_plain_lhd():
    better = 0
    for seed in range(100):
        best = maximin_lhd([10, 10], 10, make_rng(seed)).points / 9.0
        plain = _random_lhd([10, 10], 10, make_rng(seed + 1000)) / 9.0
        better += pdist(best).min() >= pdist(plain).min()
    assert better >= 95


def test_too_large_raises():
    with pytest.raises(SizeTooLarge):
        maximin_lhd([3, 3], 10, make_rng(0))


def test_mixed_design_continuous_axis_stratified():
    pts = maximin_lhd_mixed([5, None], 8, make_rng(2))
    u = pts[:, 1]
    assert np.all((u > 0) & (u < 1))
    assert sorted(np.floor(u * 8).astype(int)) == list(range(8))


def test_small_axis_design_has_no_duplicates():
    d = maximin_lhd([3, 4], 12, make_rng(1))
    assert len({tuple(p) for p in d.points}) == 12


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 60), n=st.integers(1, 60), seed=st.integers(0, 10**6))
def test_projection_one_per_stratum(m, n, seed):
    if n > m:
        n = m
    d = maximin_lhd([m], n, make_rng(seed), n_candidates=5)
    idx = d.points[:, 0]
    assert len(set(idx)) == n
    # each index falls in its own block of the partition into n pieces
    blocks = np.searchsorted(np.ceil(np.arange(1, n + 1) * m / n), idx, side="right")
    assert sorted(blocks) == list(range(n))


def test_same_rng_state_same_design():
    a = maximin_lhd([20, 7], 6, make_rng(9)).points
    b = maximin_lhd([20, 7], 6, make_rng(9)).points
    assert np.array_equal(a, b)


def test_linear_scenarios_positive():
    xi = sample_scenarios(make_problem("linear"), 3, make_rng(0))
    assert xi.shape == (3, 1) and np.all(xi > 0)


def test_supply_chain_scenario_truncated_normal():
    p = make_problem("supplychain", sigma=20)
    xi = sample_scenarios(p, 1, make_rng(0))
    assert xi.shape == (1, 4) and np.all(xi >= 0)
    big = sample_scenarios(p, 20000, make_rng(1))
    assert abs(big.mean() - 150) < 1.0
    assert abs(big.std() - 20) < 1.0


def test_zero_scenarios_empty():
    assert sample_scenarios(make_problem("linear"), 0, make_rng(0)).shape == (0, 1)


def test_point_mass():
    assert list(categorical_sample([1, 0, 0], 5, make_rng(0))) == [0] * 5


def test_uniform_frequencies():
    draws = categorical_sample(np.full(4, 0.25), 100_000, make_rng(3))
    freq = np.bincount(draws, minlength=4) / 1e5
    assert np.all(np.abs(freq - 0.25) <= 0.01)


@pytest.mark.parametrize("w", [[0, 0], [0.5, -0.1, 0.6], [np.nan, 1.0], []])
def test_degenerate_weights(w):
    with pytest.raises(DegenerateWeights):
        categorical_sample(w, 3, make_rng(0))


@settings(max_examples=30, deadline=None)
@given(w=st.lists(st.floats(0, 10), min_size=1, max_size=8).filter(lambda v: sum(v) > 0),
       seed=st.integers(0, 1000))
def test_draws_hit_only_positive_weights(w, seed):
    d = categorical_sample(w, 50, make_rng(seed))
    assert all(w[i] > 0 for i in d)


def test_farthest_point_subset_skips_clusters():
    # 50 copies of the origin plus the corners of the unit square
    P = np.vstack([np.zeros((50, 2)), [[1, 0], [0, 1], [1, 1]]])
    idx = farthest_point_subset(P, 4)
    assert list(idx) == [0, 50, 51, 52]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**16))
def test_farthest_point_subset_distinct_sorted(size, seed):
    P = np.random.default_rng(seed).random((30, 3))
    idx = farthest_point_subset(P, size)
    assert len(idx) == min(size, 30) and len(set(idx)) == len(idx)
    assert np.all(np.diff(idx) > 0)
