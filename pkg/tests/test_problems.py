import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twostage_ovs.design import make_rng
from twostage_ovs.errors import InfeasibleDecision
from twostage_ovs.problem import BudgetMeter, brute_force_optimum, make_problem
from twostage_ovs.problems import SS_PAIRS, brute_force_second_stage, simulate_supply_chain


def reference_cost(u_days, s_days, S_days, demand, days=5):
    """Plain-loop day-by-day simulation written independently of the package code."""
    level, chem = 100.0, 0.0
    for u, s, S in zip(u_days, s_days, S_days):
        level = max(level - u, 0.0)
        if level <= s:
            chem += S - level
            level = S
    carry, cost = 0.0, 0.0
    for w, d in enumerate(demand):
        made = days * u_days[w * days]
        short = max(d - carry - made, 0.0)
        carry = max(carry + made - d, 0.0)
        cost += 100.0 * short + 5.0 * carry
    return 5.0 * chem + cost


def ref_basic(y, demand):
    u, s, S = y
    return reference_cost([u] * 20, [s] * 20, [S] * 20, demand)


def ref_ext(y, demand):
    u1, u2, s1, S1, s2, S2 = y
    return reference_cost([u1] * 10 + [u2] * 10, [s1] * 10 + [s2] * 10, [S1] * 10 + [S2] * 10, demand)


# -- linear toy ----------------------------------------------------------

def test_linear_grid_and_feasibility():
    p = make_problem("linear")
    assert p.n_first_stage == 301
    assert p.second_stage_count(0) == 501
    assert p.second_stage_count(300) == 351
    assert p.is_feasible(300, [3.5]) and not p.is_feasible(300, [3.51])
    assert p.first_stage_cost(300) == pytest.approx(-9.0)


def test_linear_brute_force_zero():
    p = make_problem("linear")
    for xi in (0.01, 1.0, 40.0):
        assert brute_force_second_stage(p, 123, np.array([xi])) == (0, 0.0)


# -- supply chain --------------------------------------------------------

def test_deterministic_x0_cost():
    assert simulate_supply_chain(0, (0, 100, 200), [150] * 4) == 60500.0
    p = make_problem("supplychain", sigma=0)
    assert brute_force_second_stage(p, 0, np.full(4, 150.0))[1] == 60500.0


def test_zero_demand_zero_production():
    p = make_problem("supplychain")
    idx, val = brute_force_second_stage(p, 0, np.zeros(4))
    assert val == 500.0
    assert tuple(p.second_stage_points(0, [idx])[0]) == (0.0, 100.0, 200.0)


def test_enumeration_sizes():
    sc = make_problem("supplychain")
    assert sc.second_stage_count(1) == 20  # x = 20
    assert len(SS_PAIRS) == 10
    ext = make_problem("supplychain-ext")
    assert ext.second_stage_count(5) == 6600  # x = 100


def test_extended_constraint_enforced():
    ext = make_problem("supplychain-ext")
    Y = ext.second_stage_points(5)
    assert np.all(Y[:, 0] + Y[:, 1] <= 10)
    assert all(ext.is_feasible(5, y) for y in Y[::97])
    assert not ext.is_feasible(5, [6, 5, 100, 200, 100, 200])
    with pytest.raises(InfeasibleDecision):
        simulate_supply_chain(100, [6, 5, 100, 200, 100, 200], [150] * 4)


def test_infeasible_production():
    with pytest.raises(InfeasibleDecision):
        simulate_supply_chain(40, (3, 100, 200), [150] * 4)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_basic_matches_reference(seed):
    rng = np.random.default_rng(seed)
    p = make_problem("supplychain", sigma=30)
    ix = int(rng.integers(0, p.n_first_stage))
    j = int(rng.integers(0, p.second_stage_count(ix)))
    y = p.second_stage_points(ix, [j])[0]
    d = p.sample_scenarios(1, rng)[0]
    expected = ref_basic(y, d)
    assert p.response(ix, y, d) == pytest.approx(expected, rel=1e-12)
    assert simulate_supply_chain(p.first_stage_points[ix, 0], y, d) == pytest.approx(expected, rel=1e-12)
    assert expected >= 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_extended_matches_reference(seed):
    rng = np.random.default_rng(seed)
    p = make_problem("supplychain-ext", sigma=20)
    ix = int(rng.integers(0, 40))
    j = int(rng.integers(0, p.second_stage_count(ix)))
    y = p.second_stage_points(ix, [j])[0]
    d = p.sample_scenarios(1, rng)[0]
    assert p.response(ix, y, d) == pytest.approx(ref_ext(y, d), rel=1e-12)


@pytest.mark.parametrize("name,ix", [("supplychain", 10), ("supplychain", 37), ("supplychain-ext", 6)])
def test_optimum_matches_enumeration(name, ix):
    p = make_problem(name, sigma=20)
    xi = p.sample_scenarios(6, make_rng(3))
    fast_idx, fast_val = p.second_stage_optimum(ix, xi)
    Y = p.second_stage_points(ix)
    grid = np.array([[ref_basic(y, d) if len(y) == 3 else ref_ext(y, d) for y in Y] for d in xi])
    assert np.allclose(fast_val, grid.min(axis=1))
    assert np.all(grid[np.arange(6), fast_idx] == grid.min(axis=1))


def test_generic_brute_force_agrees():
    p = make_problem("supplychain", sigma=20)
    xi = p.sample_scenarios(4, make_rng(9))
    a = brute_force_optimum(p, 12, xi)
    b = p.second_stage_optimum(12, xi)
    assert np.allclose(a[1], b[1])


def test_cost_monotone_in_demand_at_zero_production():
    p = make_problem("supplychain")
    rng = np.random.default_rng(0)
    for _ in range(50):
        d = rng.uniform(0, 300, 4)
        bump = d + rng.uniform(0, 50, 4)
        pair = SS_PAIRS[rng.integers(10)]
        y = (0.0, *pair)
        assert p.response(0, y, bump) >= p.response(0, y, d)


def test_deterministic_scenarios_when_sigma_zero():
    p = make_problem("supplychain", sigma=0)
    assert np.all(p.sample_scenarios(5, make_rng(0)) == 150.0)
    lo, hi = p.scenario_bounds()
    assert np.all(hi > lo)


def test_budget_meter():
    from twostage_ovs.errors import BudgetExhausted
    m = BudgetMeter(3)
    m.consume(2)
    assert m.remaining == 1 and not m.exhausted
    with pytest.raises(BudgetExhausted):
        m.consume(2)
    assert m.spent == 2
    m.consume()
    assert m.exhausted and m.spent == 3


def test_unknown_problem():
    with pytest.raises(KeyError):
        make_problem("nope")
