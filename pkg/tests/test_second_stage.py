import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from twostage_ovs.design import make_rng
from twostage_ovs.errors import NonFiniteInput
from twostage_ovs.kriging import fit_kriging
from twostage_ovs.problem import BudgetMeter, make_problem
from twostage_ovs.problems import brute_force_second_stage
from twostage_ovs.second_stage import (LocalSearchConfig, NeighbourModel, _z, ei_argmax,
                                       estimate_gap, expected_improvement, model_at, new_site,
                                       relative_ei, solve_second_stage, stopping_satisfied)

SC_X200 = 10  # index of x = 200 on the 20-unit grid


def _site(problem, ix, cfg, seed, budget=10_000):
    site = new_site(ix, problem.scenario_dim)
    meter = BudgetMeter(budget)
    solve_second_stage(site, problem, meter, make_rng(seed), cfg)
    return site, meter


# -- expected improvement ------------------------------------------------

def test_ei_examples():
    assert expected_improvement(0.0, 0.0, 1.0) == pytest.approx(0.398942, abs=1e-6)
    assert expected_improvement(1.0, 0.0, 1.0) == pytest.approx(1.083316, abs=1e-6)
    assert expected_improvement(0.0, 0.3, 0.0) == 0.0
    assert expected_improvement(0.5, 0.2, 0.0) == pytest.approx(0.3)


def test_ei_vectorized():
    ei = expected_improvement(1.0, np.array([0.0, 1.0, 2.0]), np.array([1.0, 0.0, 0.5]))
    assert ei.shape == (3,) and ei[1] == 0.0


@pytest.mark.parametrize("bad", [(np.nan, 0.0, 1.0), (0.0, np.inf, 1.0), (0.0, 0.0, -1.0)])
def test_ei_rejects_bad_input(bad):
    with pytest.raises(NonFiniteInput):
        expected_improvement(*bad)


def test_ei_against_monte_carlo():
    rng = np.random.default_rng(0)
    n = 10**6
    for _ in range(50):
        delta = rng.uniform(-2, 2)
        sd = rng.uniform(0.1, 2)
        draws = np.maximum(delta - sd * rng.standard_normal(n), 0.0)
        se = draws.std(ddof=1) / math.sqrt(n)
        assert abs(expected_improvement(delta, 0.0, sd) - draws.mean()) <= 3 * se + 1e-12


def test_ei_half_sd_against_monte_carlo():
    rng = np.random.default_rng(1)
    n = 10**6
    for inc, mu in [(0.0, 0.0), (1.0, 0.3), (-1.0, 0.2)]:
        draws = np.maximum(inc - rng.normal(mu, 0.5, n), 0.0)
        se = draws.std(ddof=1) / math.sqrt(n)
        assert abs(expected_improvement(inc, mu, 0.5) - draws.mean()) <= 3 * se


@settings(max_examples=60, deadline=None)
@given(inc=st.floats(-1e3, 1e3), mu=st.floats(-1e3, 1e3), sd=st.floats(0, 1e2))
def test_ei_bounds(inc, mu, sd):
    ei = expected_improvement(inc, mu, sd)
    assert ei >= 0
    # EI dominates the plug-in improvement and is at most it plus sd * phi(0)
    assert ei >= max(inc - mu, 0.0) - 1e-9 * max(1.0, abs(inc - mu))
    assert ei <= max(inc - mu, 0.0) + sd * norm.pdf(0) + 1e-9 * max(1.0, abs(inc), abs(mu))


# -- EI maximization -----------------------------------------------------

def _linear_model(seed=0, n=12):
    p = make_problem("linear")
    rng = np.random.default_rng(seed)
    ix = 100
    Y = p.second_stage_points(ix, rng.choice(p.second_stage_count(ix), n, replace=False))
    Xi = p.sample_scenarios(n, rng)
    Z = np.hstack([Y, Xi])
    Q = p.response_batch(ix, Y, Xi)
    lo = np.array([0.0, 0.05])
    hi = np.array([p.second_stage_bounds(ix)[1][0], 10.0])
    return p, ix, fit_kriging(Z, Q, lower=lo, upper=hi, rng=seed), Z, Q


def test_ei_argmax_matches_brute_force():
    p, ix, m, _, _ = _linear_model()
    rng = np.random.default_rng(3)
    cand = np.sort(rng.choice(p.second_stage_count(ix), 50, replace=False))
    xi = np.array([1.3])
    ev = ei_argmax(m, p, ix, xi, cand, incumbent=0.5)
    vals = []
    for c in cand:
        mean, var = m.predict(_z(p, ix, np.array([c]), xi))
        vals.append(expected_improvement(0.5, mean[0], math.sqrt(var[0])))
    k = int(np.argmax(vals))
    assert ev.y == cand[k]
    # batched and one-at-a-time distance sums round differently
    assert ev.ei == pytest.approx(vals[k], rel=1e-7, abs=1e-15)


def test_ei_argmax_single_candidate():
    p, ix, m, _, _ = _linear_model()
    ev = ei_argmax(m, p, ix, np.array([1.0]), np.array([7]), incumbent=1.0)
    assert ev.y == 7 and ev.ei >= 0


def test_ei_argmax_no_improvement_at_observed_points():
    p, ix, m, Z, Q = _linear_model(n=6)
    # all candidates observed at the same xi, incumbent below every output
    xi = Z[0, 1:]
    cand = np.arange(0, 60, 10)
    Y = p.second_stage_points(ix, cand)
    Zs = np.hstack([Y, np.repeat(xi[None], len(cand), 0)])
    m2 = m.append(Zs, p.response_batch(ix, Y, Zs[:, 1:]))
    ev = ei_argmax(m2, p, ix, xi, cand, incumbent=-1.0)
    assert ev.ei <= 1e-8


def test_ei_argmax_ties_go_to_first():
    class Flat:
        def predict(self, Z):
            return np.zeros(len(Z)), np.ones(len(Z))
    p = make_problem("linear")
    ev = ei_argmax(Flat(), p, 0, np.array([1.0]), np.array([5, 3, 9]), incumbent=0.0)
    assert ev.y == 5


# -- stopping rule -------------------------------------------------------

def test_stopping_examples():
    assert stopping_satisfied(0.1, 0.0, 10.0)
    assert not stopping_satisfied(0.1, 1.5, 10.0)
    assert stopping_satisfied(0.1, 0.9, 10.0)


def test_stopping_small_denominator():
    assert relative_ei(1e-10, 0.0) == pytest.approx(1e-2)
    assert not stopping_satisfied(1e-3, 1e-10, 0.0)


# -- local search --------------------------------------------------------

def test_schedule_law():
    cfg = LocalSearchConfig(alpha0=0.1, n0=10, g=1.5)
    assert [cfg.n_scenarios(t) for t in range(1, 6)] == [10, 15, 23, 34, 51]
    for t in range(1, 6):
        assert cfg.alpha(t) == pytest.approx(0.1 * 1.5 ** (-(t - 1) / 2))


def test_schedule_law_across_visits():
    p = make_problem("linear")
    cfg = LocalSearchConfig(n0=4)
    site = new_site(150, 1)
    meter = BudgetMeter(100_000)
    rng = make_rng(0)
    for t in range(1, 5):
        solve_second_stage(site, p, meter, rng, cfg)
        assert site.visits == t
        assert site.n_scenarios == math.ceil(4 * 1.5 ** (t - 1))
        assert site.alpha == pytest.approx(0.1 * 1.5 ** (-(t - 1) / 2))
        assert site.initialized.all()


def test_infinite_alpha_stops_after_initialization():
    p = make_problem("linear")
    cfg = LocalSearchConfig(alpha0=math.inf, n0=5)
    site, _ = _site(p, 120, cfg, seed=0)
    assert site.terminated.all() and site.n_ei_sims == 0
    assert site.n_scenarios == 5


@pytest.mark.parametrize("seed", range(5))
def test_linear_incumbents_are_zero(seed):
    p = make_problem("linear")
    ix = [0, 50, 150, 250, 300][seed]
    site, _ = _site(p, ix, LocalSearchConfig(n0=10), seed)
    assert np.all(site.inc_idx == 0)
    assert np.allclose(site.inc_val, 0.0)


def test_incumbents_are_real_outputs_and_not_below_optimum():
    p = make_problem("supplychain", sigma=20)
    for seed in range(3):
        site, _ = _site(p, SC_X200, LocalSearchConfig(n0=5), seed)
        for j in range(site.n_scenarios):
            xi = site.scenarios[j]
            y = p.second_stage_points(SC_X200, np.array([site.inc_idx[j]]))[0]
            assert site.inc_val[j] == p.response(SC_X200, y, xi)
            assert site.inc_val[j] >= brute_force_second_stage(p, SC_X200, xi)[1] - 1e-9


def test_supply_chain_x200_within_alpha():
    p = make_problem("supplychain", sigma=20)
    ok = total = 0
    for seed in range(20):
        site, _ = _site(p, SC_X200, LocalSearchConfig(alpha0=0.1, n0=5), seed)
        for j in np.flatnonzero(site.terminated):
            best = brute_force_second_stage(p, SC_X200, site.scenarios[j])[1]
            total += 1
            ok += (site.inc_val[j] - best) / abs(best) <= 0.1
    assert total > 0 and ok / total >= 0.9


def test_hard_cap_per_scenario():
    # a tiny recourse set is exhausted by the search without looping
    p = make_problem("linear", x_max=3.0, y_cap=1.55)
    ix = 300  # x = 3 leaves y in {0, 0.01, ..., 0.05}
    assert p.second_stage_count(ix) == 6
    site, _ = _site(p, ix, LocalSearchConfig(alpha0=1e-12, n0=4), 0)
    for j in range(site.n_scenarios):
        assert len(site.tried[j]) <= 6
    assert site.terminated.all()


def test_budget_exhaustion_is_partial_state():
    p = make_problem("supplychain", sigma=20)
    site, meter = _site(p, SC_X200, LocalSearchConfig(n0=5), 0, budget=15)
    assert site.truncated and meter.spent == 15
    assert site.sims == 15


def test_incumbent_monotone_within_visit():
    p = make_problem("supplychain", sigma=20)
    cfg = LocalSearchConfig(n0=5)
    site = new_site(SC_X200, 4)
    meter = BudgetMeter(10_000)
    history = []
    import twostage_ovs.second_stage as ss
    orig = ss._Local.refit

    def spy(self, force=False):
        history.append(self.site.inc_val.copy())
        return orig(self, force)

    ss._Local.refit = spy
    try:
        solve_second_stage(site, p, meter, make_rng(4), cfg)
    finally:
        ss._Local.refit = orig
    hist = [h for h in history if len(h) == 5 and np.all(np.isfinite(h))]
    for a, b in zip(hist, hist[1:]):
        assert np.all(b <= a)


# -- optimality gaps -----------------------------------------------------

def test_gap_zero_without_uncertainty():
    p = make_problem("linear", y_cap=1.55)
    ix = 300
    xi = np.array([1.7])
    Y = p.second_stage_points(ix)
    Z = np.vstack([np.hstack([Y, np.full((6, 1), xi)]), [[0.02, 0.5], [0.04, 3.0]]])
    Q = Z[:, 0] * Z[:, 1]
    m = fit_kriging(Z, Q, lower=[0, 0], upper=[0.05, 5], rng=0)
    g = estimate_gap(m, p, ix, xi, 0.0, 200, make_rng(0))
    assert g == pytest.approx(0.0, abs=1e-8)


def test_gap_bounds_random_models():
    p = make_problem("supplychain", sigma=20)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(6, 20))
        cand = rng.choice(p.second_stage_count(SC_X200), n, replace=False)
        Y = p.second_stage_points(SC_X200, cand)
        Xi = p.sample_scenarios(n, rng)
        Q = p.response_batch(SC_X200, Y, Xi)
        lo = np.r_[0.0, 100.0, 200.0, np.full(4, 100.0)]
        hi = np.r_[10.0, 400.0, 500.0, np.full(4, 200.0)]
        m = fit_kriging(np.hstack([Y, Xi]), Q, lower=lo, upper=hi, rng=seed, n_starts=1)
        xi = Xi[0]
        inc = float(Q[0])
        allz = _z(p, SC_X200, np.arange(p.second_stage_count(SC_X200)), xi)
        mean, var = m.predict(allz)
        bound = max(inc - float(np.min(mean - 6 * np.sqrt(var))), 0.0)
        g = estimate_gap(m, p, SC_X200, xi, inc, 50, make_rng(seed))
        assert 0.0 <= g <= bound + 1e-9 * max(1.0, abs(inc))


def test_gap_monte_carlo_self_consistency():
    p = make_problem("supplychain", sigma=20)
    rng = np.random.default_rng(11)
    cand = rng.choice(110, 25, replace=False)
    Y = p.second_stage_points(SC_X200, cand)
    Xi = p.sample_scenarios(25, rng)
    Q = p.response_batch(SC_X200, Y, Xi)
    lo = np.r_[0.0, 100.0, 200.0, np.full(4, 100.0)]
    hi = np.r_[10.0, 400.0, 500.0, np.full(4, 200.0)]
    m = fit_kriging(np.hstack([Y, Xi]), Q, lower=lo, upper=hi, rng=0)
    xi, inc = Xi[3], float(Q[3])
    big = estimate_gap(m, p, SC_X200, xi, inc, 2000, make_rng(1))
    # spread of the per-path gap, measured from an independent batch of paths
    per_path = [estimate_gap(m, p, SC_X200, xi, inc, 1, make_rng(100 + k)) for k in range(200)]
    small = estimate_gap(m, p, SC_X200, xi, inc, 50, make_rng(2))
    assert abs(big - small) <= 4 * np.std(per_path) / math.sqrt(50) + 1e-12


def test_site_gaps_nonnegative():
    p = make_problem("supplychain", sigma=20)
    site, _ = _site(p, SC_X200, LocalSearchConfig(n0=5), 3)
    assert site.gap is not None and np.all(site.gap >= 0)
    assert len(site.gap) == site.n_scenarios


# -- neighbour models for large designs -----------------------------------

def _neighbour(k, n=40, seed=0):
    p, ix, m, Z, Q = _linear_model(seed=seed, n=n)
    lo = m.lower
    hi = m.lower + m.scale
    return p, ix, m, NeighbourModel(Z, Q, m.phi, lo, hi, d_y=1, k=k)


def test_neighbour_model_with_all_points_is_exact():
    p, ix, m, nm = _neighbour(k=40)
    xi = np.array([2.2])
    Z = _z(p, ix, np.arange(0, 200, 7), xi)
    a, b = m.predict(Z), model_at(nm, xi).predict(Z)
    assert np.allclose(a[0], b[0], rtol=1e-12, atol=1e-12) and np.allclose(a[1], b[1], atol=1e-12)


def test_neighbours_are_closest_in_scenario():
    _, _, _, nm = _neighbour(k=10)
    xi = np.array([4.0])
    idx = nm.neighbours(xi)
    d = np.abs(nm.design[:, 1] - 4.0)
    assert len(idx) == 10
    assert d[idx].max() <= np.delete(d, idx).min()


def test_neighbour_model_interpolates_its_scenario():
    p, ix, _, nm = _neighbour(k=8, n=60, seed=2)
    j = 17
    xi = nm.design[j, 1:]
    mean, var = model_at(nm, xi).predict(nm.design[j:j + 1])
    assert mean[0] == nm.outputs[j] and var[0] == 0.0


def test_model_at_passes_exact_models_through():
    _, _, m, _, _ = _linear_model()
    assert model_at(m, np.array([1.0])) is m


def test_large_design_switches_to_neighbour_model():
    p = make_problem("linear")
    cfg = LocalSearchConfig(exact_limit=25, neighbours=15, n0=12)
    site, meter = _site(p, 300, cfg, seed=3, budget=400)
    assert len(site.outputs) > 25 and isinstance(site.model, NeighbourModel)
    assert site.sims == meter.spent
    assert np.all(site.inc_val >= 0.0) and np.all(site.gap >= 0)
    # a second visit keeps working on the approximate model
    solve_second_stage(site, p, meter, make_rng(4), cfg)
    assert site.complete and site.n_scenarios == cfg.n_scenarios(2)
