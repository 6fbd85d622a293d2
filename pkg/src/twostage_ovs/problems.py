"""Benchmark problems: the two-stage linear toy and the bio-pharma supply chain."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtri

from .errors import InfeasibleDecision
from .problem import TwoStageProblem, brute_force_optimum, register_problem

# (s, S) review-policy pairs available to the chemical raw material.
SS_PAIRS = np.array([
    (100, 200), (100, 300), (100, 400), (100, 500), (200, 300),
    (200, 400), (200, 500), (300, 400), (300, 500), (400, 500),
], dtype=float)
_PAIR_INDEX = {(float(s), float(S)): p for p, (s, S) in enumerate(SS_PAIRS)}


@register_problem("linear")
class LinearToyProblem(TwoStageProblem):
    """min_x -3x + E[min_y xi*y] s.t. 0.5x + y <= 5, y >= 0, xi ~ Lognormal(0, 1).

    Both stages are discretized on a 0.01 grid; x lies in [0, 3].  The
    optimum is x* = 3 with G(x*) = -9 because y = 0 is optimal for every
    positive xi.
    """

    name = "linear"
    scenario_dim = 1
    reference_optimum = -9.0

    def __init__(self, step: float = 0.01, x_max: float = 3.0, y_cap: float = 5.0):
        self.step = step
        self.y_cap = y_cap
        n_x = int(round(x_max / step)) + 1
        self.first_stage_points = (np.arange(n_x) * step).reshape(-1, 1)
        # number of y grid steps allowed at each x, from 0.5x + y <= cap
        self._y_top = np.floor((y_cap - 0.5 * self.first_stage_points[:, 0]) / step + 1e-9).astype(int)

    def first_stage_cost(self, ix: int) -> float:
        return -3.0 * float(self.first_stage_points[ix, 0])

    def second_stage_count(self, ix: int) -> int:
        return int(self._y_top[ix]) + 1

    def second_stage_points(self, ix, idx=None):
        if idx is None:
            idx = np.arange(self.second_stage_count(ix))
        return (np.asarray(idx, dtype=float) * self.step).reshape(-1, 1)

    def second_stage_axes(self, ix):
        return [self.second_stage_count(ix)]

    def second_stage_from_axes(self, ix, axis_idx):
        return np.asarray(axis_idx)[:, 0].astype(int)

    def second_stage_bounds(self, ix):
        return np.array([0.0]), np.array([self._y_top[ix] * self.step])

    def is_feasible(self, ix, y):
        j = float(y[0]) / self.step
        return abs(j - round(j)) < 1e-6 and 0 <= round(j) <= self._y_top[ix]

    def sample_scenarios(self, n, rng):
        return rng.lognormal(0.0, 1.0, size=(n, 1))

    def scenario_quantile(self, u):
        return np.exp(ndtri(np.asarray(u, dtype=float)))

    def response(self, ix, y, xi):
        return float(xi[0] * y[0])

    def response_batch(self, ix, Y, Xi):
        return Xi[:, 0] * Y[:, 0]

    def response_grid(self, ix, Y, Xi):
        return np.outer(Xi[:, 0], Y[:, 0])


@dataclass(frozen=True)
class SupplyChainPrices:
    soy: float = 10.0         # P_s, first-stage unit cost
    chemical: float = 5.0     # P_r
    holding: float = 5.0      # P_e
    subcontract: float = 100.0  # P_c
    initial_chemical: float = 100.0
    weeks: int = 4
    days: int = 5


def chemical_order_units(u_daily: np.ndarray, s_daily: np.ndarray, S_daily: np.ndarray,
                         initial: float) -> Tuple[np.ndarray, np.ndarray]:
    """Total chemical units ordered under a daily (s, S) review with zero lead time.

    Arrays have shape ``(n, n_days)``; each day the day's production first
    consumes ``u`` units, then the review orders up to ``S`` when the level
    is at or below ``s``.  Returns ordered units and the ending inventory.
    """
    level = np.full(u_daily.shape[0], float(initial))
    ordered = np.zeros(u_daily.shape[0])
    for day in range(u_daily.shape[1]):
        level = np.maximum(level - u_daily[:, day], 0.0)
        reorder = level <= s_daily[:, day]
        ordered += np.where(reorder, S_daily[:, day] - level, 0.0)
        level = np.where(reorder, S_daily[:, day], level)
    return ordered, level


def production_cost(u_weekly: np.ndarray, demand: np.ndarray, prices: SupplyChainPrices) -> np.ndarray:
    """Subcontract plus holding cost of the weekly product balance.

    ``u_weekly`` and ``demand`` broadcast against each other over their
    leading axes; the last axis runs over weeks.  Use ``u[None]`` and
    ``demand[:, None]`` to get a (scenario, decision) grid.
    """
    u_weekly, demand = np.broadcast_arrays(np.asarray(u_weekly, float), np.asarray(demand, float))
    carry = np.zeros(demand.shape[:-1])
    cost = np.zeros_like(carry)
    for week in range(demand.shape[-1]):
        made = prices.days * u_weekly[..., week]
        d = demand[..., week]
        short = np.maximum(d - carry - made, 0.0)
        carry = np.maximum(carry + made - d, 0.0)
        cost += prices.subcontract * short + prices.holding * carry
    return cost


def simulate_supply_chain(x: float, y: Sequence[float], demand: Sequence[float],
                          prices: SupplyChainPrices = SupplyChainPrices()) -> float:
    """Second-stage cost of the supply chain for one demand scenario.

    ``y`` is ``(u, s, S)`` for the basic problem, or
    ``(u1, u2, s1, S1, s2, S2)`` for the two-period variant where the first
    half of the weeks uses ``(u1, s1, S1)`` and the second half
    ``(u2, s2, S2)``.  The first-stage soy cost is not included.
    """
    y = np.asarray(y, dtype=float)
    demand = np.asarray(demand, dtype=float)
    n_days = prices.weeks * prices.days
    half = n_days // 2
    if y.size == 3:
        u, s, S = y
        if u < 0 or u > x / (prices.days * prices.weeks) + 1e-9 or u != round(u):
            raise InfeasibleDecision(f"production {u} infeasible for soy order {x}")
        u_days = np.full(n_days, u)
        s_days, S_days = np.full(n_days, s), np.full(n_days, S)
        u_weeks = np.full(prices.weeks, u)
    elif y.size == 6:
        u1, u2, s1, S1, s2, S2 = y
        if min(u1, u2) < 0 or u1 + u2 > x / (prices.days * prices.weeks / 2) + 1e-9:
            raise InfeasibleDecision(f"production {(u1, u2)} infeasible for soy order {x}")
        u_days = np.r_[np.full(half, u1), np.full(n_days - half, u2)]
        s_days = np.r_[np.full(half, s1), np.full(n_days - half, s2)]
        S_days = np.r_[np.full(half, S1), np.full(n_days - half, S2)]
        u_weeks = np.r_[np.full(prices.weeks // 2, u1), np.full(prices.weeks - prices.weeks // 2, u2)]
    else:
        raise InfeasibleDecision(f"second-stage decision must have 3 or 6 entries, got {y.size}")
    ordered, _ = chemical_order_units(u_days[None], s_days[None], S_days[None], prices.initial_chemical)
    return float(prices.chemical * ordered[0] + production_cost(u_weeks, demand, prices))


class _SupplyChainBase(TwoStageProblem):
    scenario_dim = 4
    # G(x*) reported for the basic problem, keyed by demand SD
    REFERENCE_OPTIMA = {10.0: 9912.0, 20.0: 10625.0, 30.0: 11484.0}

    def __init__(self, sigma: float = 20.0, demand_mean: float = 150.0, x_step: float = 20.0,
                 x_max: float = 5000.0, prices: Optional[SupplyChainPrices] = None):
        self.sigma = float(sigma)
        self.demand_mean = float(demand_mean)
        self.prices = prices or SupplyChainPrices()
        self.scenario_dim = self.prices.weeks
        self.first_stage_points = (np.arange(int(round(x_max / x_step)) + 1) * x_step).reshape(-1, 1)

    def first_stage_cost(self, ix):
        return self.prices.soy * float(self.first_stage_points[ix, 0])

    def sample_scenarios(self, n, rng):
        d = rng.normal(self.demand_mean, self.sigma, size=(n, self.scenario_dim))
        return np.maximum(d, 0.0)

    def scenario_quantile(self, u):
        return np.maximum(self.demand_mean + self.sigma * ndtri(np.asarray(u, dtype=float)), 0.0)

    def scenario_bounds(self):
        lo, hi = super().scenario_bounds()
        if self.sigma == 0:
            # deterministic demand: any positive width keeps normalization finite
            lo, hi = lo - 1.0, hi + 1.0
        return lo, hi


@register_problem("supplychain")
class SupplyChainProblem(_SupplyChainBase):
    """Soy order x, then production rate u and a chemical (s, S) policy.

    Y(x) = {0, ..., floor(x/20)} x SS_PAIRS, flattened with u major and the
    pair index minor.  Coordinates are ``(u, s, S)``.
    """

    name = "supplychain"

    def __init__(self, **kw):
        super().__init__(**kw)
        n_days = self.prices.weeks * self.prices.days
        self._u_cap = (self.first_stage_points[:, 0] // n_days).astype(int)
        u_all = np.arange(self._u_cap.max() + 1, dtype=float)
        uu = np.repeat(u_all, len(SS_PAIRS))
        ss = np.tile(SS_PAIRS, (len(u_all), 1))
        ordered, _ = chemical_order_units(
            np.repeat(uu[:, None], n_days, 1), np.repeat(ss[:, :1], n_days, 1),
            np.repeat(ss[:, 1:], n_days, 1), self.prices.initial_chemical)
        # chemical ordering cost for flat index u*10 + pair
        self._chem_cost = self.prices.chemical * ordered
        self._min_chem = self._chem_cost.reshape(len(u_all), len(SS_PAIRS)).min(axis=1)
        self.reference_optimum = self.REFERENCE_OPTIMA.get(self.sigma)

    def second_stage_count(self, ix):
        return (int(self._u_cap[ix]) + 1) * len(SS_PAIRS)

    def second_stage_points(self, ix, idx=None):
        if idx is None:
            idx = np.arange(self.second_stage_count(ix))
        idx = np.asarray(idx, dtype=int)
        return np.column_stack([idx // len(SS_PAIRS), SS_PAIRS[idx % len(SS_PAIRS)]]).astype(float)

    def second_stage_axes(self, ix):
        return [int(self._u_cap[ix]) + 1, len(SS_PAIRS)]

    def second_stage_from_axes(self, ix, axis_idx):
        axis_idx = np.asarray(axis_idx, dtype=int)
        return axis_idx[:, 0] * len(SS_PAIRS) + axis_idx[:, 1]

    def second_stage_bounds(self, ix):
        return np.array([0.0, 100.0, 200.0]), np.array([float(self._u_cap[ix]), 400.0, 500.0])

    def _flat_index(self, y):
        u, s, S = (float(v) for v in y)
        pair = _PAIR_INDEX.get((s, S))
        if pair is None or u != round(u):
            return None
        return int(round(u)) * len(SS_PAIRS) + pair

    def is_feasible(self, ix, y):
        flat = self._flat_index(y)
        return flat is not None and 0 <= y[0] <= self._u_cap[ix]

    def response(self, ix, y, xi):
        return float(self.response_batch(ix, np.atleast_2d(y), np.atleast_2d(xi))[0])

    def response_batch(self, ix, Y, Xi):
        Y = np.atleast_2d(Y)
        flat = np.array([self._flat_index(y) for y in Y])
        u_weeks = np.repeat(Y[:, :1], self.prices.weeks, axis=1)
        return self._chem_cost[flat] + production_cost(u_weeks, np.atleast_2d(Xi), self.prices)

    def response_grid(self, ix, Y, Xi):
        flat = np.array([self._flat_index(y) for y in Y])
        u_weeks = np.repeat(Y[:, :1], self.prices.weeks, axis=1)
        return self._chem_cost[flat][None, :] + production_cost(
            u_weeks[None], np.atleast_2d(Xi)[:, None], self.prices)

    def second_stage_optimum(self, ix, scenarios):
        # q = chem(u, pair) + prod(u, demand): minimize the pair out per u first
        u_vals = np.arange(self._u_cap[ix] + 1)
        u_weeks = np.repeat(u_vals[:, None].astype(float), self.prices.weeks, axis=1)
        total = self._min_chem[u_vals][None, :] + production_cost(
            u_weeks[None], np.atleast_2d(scenarios)[:, None], self.prices)
        best_u = np.argmin(total, axis=1)
        chem = self._chem_cost.reshape(-1, len(SS_PAIRS))
        best_pair = np.argmin(chem[best_u], axis=1)
        return best_u * len(SS_PAIRS) + best_pair, total[np.arange(len(total)), best_u]


@register_problem("supplychain-ext")
class ExtendedSupplyChainProblem(_SupplyChainBase):
    """Two-period variant with y = (u1, u2, s1, S1, s2, S2), u1 + u2 <= x/10.

    Y(x) is flattened as ``tri * 100 + pair1 * 10 + pair2`` where ``tri``
    enumerates the production pairs with u1 major.
    """

    name = "supplychain-ext"
    n_pairs = len(SS_PAIRS) ** 2

    def __init__(self, **kw):
        super().__init__(**kw)
        half_days = self.prices.weeks * self.prices.days // 2
        self._k = (self.first_stage_points[:, 0] // half_days).astype(int)
        self._tri_cache = {}
        self._chem_cache = {}
        self.reference_optimum = None

    def _triangle(self, k: int) -> np.ndarray:
        if k not in self._tri_cache:
            u1, u2 = np.triu_indices(k + 1)
            # (u1, u2 - u1) walks u1 major with u2 in 0..k-u1
            self._tri_cache[k] = np.column_stack([u1, u2 - u1])
        return self._tri_cache[k]

    def second_stage_count(self, ix):
        k = int(self._k[ix])
        return (k + 1) * (k + 2) // 2 * self.n_pairs

    def _decode(self, ix, idx):
        idx = np.asarray(idx, dtype=np.int64)
        tri = self._triangle(int(self._k[ix]))[idx // self.n_pairs]
        p1 = (idx % self.n_pairs) // len(SS_PAIRS)
        p2 = idx % len(SS_PAIRS)
        return tri, p1, p2

    def second_stage_points(self, ix, idx=None):
        if idx is None:
            idx = np.arange(self.second_stage_count(ix))
        tri, p1, p2 = self._decode(ix, idx)
        return np.column_stack([tri, SS_PAIRS[p1], SS_PAIRS[p2]]).astype(float)

    def second_stage_axes(self, ix):
        k = int(self._k[ix])
        return [(k + 1) * (k + 2) // 2, len(SS_PAIRS), len(SS_PAIRS)]

    def second_stage_from_axes(self, ix, axis_idx):
        a = np.asarray(axis_idx, dtype=np.int64)
        return a[:, 0] * self.n_pairs + a[:, 1] * len(SS_PAIRS) + a[:, 2]

    def second_stage_bounds(self, ix):
        k = float(self._k[ix])
        return (np.array([0.0, 0.0, 100.0, 200.0, 100.0, 200.0]),
                np.array([k, k, 400.0, 500.0, 400.0, 500.0]))

    def is_feasible(self, ix, y):
        u1, u2, s1, S1, s2, S2 = (float(v) for v in y)
        pairs_ok = all(((SS_PAIRS[:, 0] == s) & (SS_PAIRS[:, 1] == S)).any() for s, S in ((s1, S1), (s2, S2)))
        return (pairs_ok and u1 == round(u1) and u2 == round(u2)
                and min(u1, u2) >= 0 and u1 + u2 <= self._k[ix])

    def _chem(self, Y: np.ndarray) -> np.ndarray:
        keys = [tuple(row) for row in Y]
        missing = [k for k in dict.fromkeys(keys) if k not in self._chem_cache]
        if missing:
            M = np.array(missing)
            n_days = self.prices.weeks * self.prices.days
            half = n_days // 2
            u = np.repeat(M[:, [0, 1]], [half, n_days - half], axis=1)
            s = np.repeat(M[:, [2, 4]], [half, n_days - half], axis=1)
            S = np.repeat(M[:, [3, 5]], [half, n_days - half], axis=1)
            ordered, _ = chemical_order_units(u, s, S, self.prices.initial_chemical)
            self._chem_cache.update(zip(missing, self.prices.chemical * ordered))
        return np.array([self._chem_cache[k] for k in keys])

    def _u_weeks(self, Y):
        w = self.prices.weeks
        return np.repeat(Y[:, :2], [w // 2, w - w // 2], axis=1)

    def response(self, ix, y, xi):
        return float(self.response_grid(ix, np.atleast_2d(y), np.atleast_2d(xi))[0, 0])

    def response_batch(self, ix, Y, Xi):
        Y = np.atleast_2d(Y)
        return self._chem(Y) + production_cost(self._u_weeks(Y), np.atleast_2d(Xi), self.prices)

    def response_grid(self, ix, Y, Xi):
        Y = np.atleast_2d(Y)
        return self._chem(Y)[None, :] + production_cost(
            self._u_weeks(Y)[None], np.atleast_2d(Xi)[:, None], self.prices)

    def _min_chem_table(self, tri: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Cheapest (pair1, pair2) for each production pair in ``tri``."""
        n_p = len(SS_PAIRS)
        p1, p2 = np.divmod(np.arange(self.n_pairs), n_p)
        best_val = np.empty(len(tri))
        best_pp = np.empty(len(tri), dtype=int)
        for start in range(0, len(tri), 2000):
            t = tri[start:start + 2000]
            rows = np.column_stack([np.repeat(t, self.n_pairs, axis=0),
                                    np.tile(SS_PAIRS[p1], (len(t), 1)),
                                    np.tile(SS_PAIRS[p2], (len(t), 1))])
            n_days = self.prices.weeks * self.prices.days
            half = n_days // 2
            u = np.repeat(rows[:, [0, 1]], [half, n_days - half], axis=1)
            s = np.repeat(rows[:, [2, 4]], [half, n_days - half], axis=1)
            S = np.repeat(rows[:, [3, 5]], [half, n_days - half], axis=1)
            ordered, _ = chemical_order_units(u, s, S, self.prices.initial_chemical)
            cost = (self.prices.chemical * ordered).reshape(len(t), self.n_pairs)
            best_pp[start:start + len(t)] = np.argmin(cost, axis=1)
            best_val[start:start + len(t)] = cost.min(axis=1)
        return best_val, best_pp

    def second_stage_optimum(self, ix, scenarios):
        k = int(self._k[ix])
        tri = self._triangle(k)
        key = ("minchem", k)
        if key not in self._chem_cache:
            self._chem_cache[key] = self._min_chem_table(tri)
        min_chem, best_pp = self._chem_cache[key]
        scenarios = np.atleast_2d(scenarios)
        best_val = np.full(len(scenarios), np.inf)
        best_t = np.zeros(len(scenarios), dtype=int)
        for start in range(0, len(tri), 512):
            t = tri[start:start + 512].astype(float)
            total = min_chem[start:start + len(t)][None, :] + production_cost(
                self._u_weeks(t)[None], scenarios[:, None], self.prices)
            j = np.argmin(total, axis=1)
            v = total[np.arange(len(scenarios)), j]
            better = v < best_val
            best_val[better] = v[better]
            best_t[better] = start + j[better]
        return best_t * self.n_pairs + best_pp[best_t], best_val


def brute_force_second_stage(problem: TwoStageProblem, ix: int, xi: np.ndarray) -> Tuple[int, float]:
    """Exact second-stage minimizer for one scenario by full enumeration."""
    idx, val = brute_force_optimum(problem, ix, np.atleast_2d(xi))
    return int(idx[0]), float(val[0])


def problem_names() -> List[str]:
    return ["linear", "supplychain", "supplychain-ext"]
