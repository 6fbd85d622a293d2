"""Global-local metamodel search over the first-stage decision.

Each outer iteration solves the recourse problems at a handful of first-stage
sites (:mod:`.second_stage`), turns them into gap-adjusted SAA estimates with
bootstrap noise variances, fits a stochastic-kriging model over the visited
sites and samples the next sites from the posterior probability of beating
the incumbent.  The loop runs until the simulation budget is spent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional

import numpy as np
from scipy.stats import norm

from .design import categorical_sample, make_rng, maximin_lhd
from .errors import ConfigError, IncompleteSite
from .kriging import SKModel, fit_sk
from .problem import BudgetMeter, TwoStageProblem
from .second_stage import LocalSearchConfig, SiteState, new_site, solve_second_stage

log = logging.getLogger(__name__)

V_FLOOR_REL = 1e-12
MAX_IDLE_ITERS = 20


@dataclass
class AlgoConfig:
    """Settings of the global-local search; defaults are the published ones."""

    C: int = 600
    alpha0: float = 0.1
    n0: int = 10
    g: float = 1.5
    s: int = 5
    T: int = 100
    B: int = 100
    seed: int = 0
    n_initial: Optional[int] = None  # None means 10 * dim(x)
    local_design_per_dim: float = 10.0
    local_design_cap: int = 200
    max_iter: int = 10_000

    def validate(self) -> "AlgoConfig":
        checks = [
            (self.C >= 1, "C must be at least 1"),
            (0 < self.alpha0 < 1 or self.alpha0 == float("inf"), "alpha0 must lie in (0, 1)"),
            (self.n0 >= 2, "n0 must be at least 2"),
            (self.g > 1, "g must exceed 1"),
            (self.s >= 1, "s must be at least 1"),
            (self.T >= 2, "T must be at least 2"),
            (self.B >= 1, "B must be at least 1"),
            (self.n_initial is None or self.n_initial >= 1, "n_initial must be positive"),
            (self.local_design_per_dim > 0, "local_design_per_dim must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def local(self) -> LocalSearchConfig:
        return LocalSearchConfig(alpha0=self.alpha0, n0=self.n0, g=self.g, B=self.B,
                                 design_per_dim=self.local_design_per_dim,
                                 design_cap=self.local_design_cap)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class TraceRow:
    iter: int
    spent: int
    ix: int
    gbar: float


@dataclass
class SiteSummary:
    gbar: float
    plain_mean: float
    variance: float
    visits: int
    n_scenarios: int


@dataclass
class RunRecord:
    """Outcome of one run of any search method on one problem."""

    algo: str
    ix: int
    x: tuple
    gbar: float
    spent: int
    budget: int
    truncated: bool = False
    trace: List[TraceRow] = field(default_factory=list)
    sites: Dict[int, SiteSummary] = field(default_factory=dict)


@dataclass
class GlobalState:
    sites: Dict[int, SiteState] = field(default_factory=dict)
    current_iter: int = 0
    incumbent: Optional[int] = None
    incumbent_value: float = np.inf
    global_model: Optional[SKModel] = None
    trace: List[TraceRow] = field(default_factory=list)
    gbar: Dict[int, float] = field(default_factory=dict)
    variance: Dict[int, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# site-level estimates
# ---------------------------------------------------------------------------

def _adjusted_values(site: SiteState, allow_partial: bool) -> np.ndarray:
    ok = site.initialized
    if site.gap is None or len(site.gap) != site.n_scenarios or not ok.any():
        raise IncompleteSite(f"site {site.ix} has no gap estimates")
    if not allow_partial and not ok.all():
        raise IncompleteSite(f"site {site.ix} has scenarios without incumbents")
    return site.inc_val[ok] - site.gap[ok]


def gap_adjusted_saa(site: SiteState, problem: TwoStageProblem, allow_partial: bool = False) -> float:
    """``c0(x) + mean_j (q(x, y*_j, xi_j) - gap_j)`` over the site's scenarios.

    Raises
    ------
    IncompleteSite
        If some scenario lacks an incumbent (unless ``allow_partial``) or
        gaps have not been estimated.
    """
    return float(problem.first_stage_cost(site.ix) + _adjusted_values(site, allow_partial).mean())


def plain_saa(site: SiteState, problem: TwoStageProblem) -> float:
    ok = site.initialized
    return float(problem.first_stage_cost(site.ix) + site.inc_val[ok].mean())


def bootstrap_variance(values, T: int, rng: np.random.Generator) -> float:
    """Variance of ``T`` bootstrap resample means of ``values``.

    ``values`` may also be a :class:`SiteState`, whose gap-adjusted
    incumbent values are used.
    """
    if isinstance(values, SiteState):
        values = _adjusted_values(values, allow_partial=False)
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise IncompleteSite("bootstrap needs at least two values")
    if T < 2:
        raise ValueError("T must be at least 2")
    if np.ptp(v) == 0:
        return 0.0
    idx = rng.integers(0, v.size, size=(T, v.size))
    return float(np.var(v[idx].mean(axis=1), ddof=1))


# ---------------------------------------------------------------------------
# global model and sampling
# ---------------------------------------------------------------------------

def fit_global(state: GlobalState, problem: TwoStageProblem, rng=None) -> SKModel:
    """Stochastic kriging over visited sites with outputs Gbar and noise V."""
    ixs = sorted(state.gbar)
    if len(ixs) < 2:
        raise IncompleteSite("the global model needs two sites with estimates")
    X = problem.first_stage_points[ixs]
    G = np.array([state.gbar[i] for i in ixs])
    V = np.array([state.variance[i] for i in ixs])
    V = np.maximum(V, V_FLOOR_REL * np.var(G))
    lo, hi = problem.first_stage_bounds()
    model = fit_sk(X, G, V, lower=lo, upper=hi, rng=rng)
    state.global_model = model
    return model


def improvement_probability(mean, var, incumbent_value) -> np.ndarray:
    return np.exp(log_improvement_probability(mean, var, incumbent_value))


def log_improvement_probability(mean, var, incumbent_value) -> np.ndarray:
    """``log P(G(x) < incumbent)``; the indicator limit (0 or -inf) where the variance is 0."""
    sd = np.sqrt(np.maximum(var, 0.0))
    pos = sd > 0
    with np.errstate(divide="ignore"):
        return np.where(pos, norm.logcdf((incumbent_value - mean) / np.where(pos, sd, 1.0)),
                        np.log((mean < incumbent_value).astype(float)))


def sampling_distribution(model: SKModel, incumbent_value: float, X, chunk: int = 200_000) -> np.ndarray:
    """Probability vector over the rows of ``X`` proportional to P(G(x) < incumbent).

    Zero-variance points get the limiting indicator; if nothing has positive
    mass the uniform distribution is returned.  Probabilities are normalized
    in log space and points with positive variance keep at least the smallest
    positive float, so no such point is ever unreachable.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    logp = np.empty(len(X))
    pos = np.empty(len(X), dtype=bool)
    for a in range(0, len(X), chunk):
        mean, var = model.predict(X[a:a + chunk])
        logp[a:a + chunk] = log_improvement_probability(mean, var, incumbent_value)
        pos[a:a + chunk] = var > 0
    top = logp.max()
    if not np.isfinite(top):
        return np.full(len(X), 1.0 / len(X))
    f = np.exp(logp - top)
    f = np.where(pos, np.maximum(f, np.finfo(float).tiny), f)
    return f / f.sum()


def draw_sites(f: np.ndarray, s: int, rng: np.random.Generator) -> List[int]:
    """``s`` draws from ``f`` with replacement, duplicates removed (first occurrence kept)."""
    draws = categorical_sample(f, s, rng)
    return list(dict.fromkeys(int(i) for i in draws))


def initial_sites(problem: TwoStageProblem, n: int, rng: np.random.Generator) -> List[int]:
    axes = problem.first_stage_axes()
    n = min(n, int(np.prod(axes)))
    design = maximin_lhd(axes, n, rng)
    return list(dict.fromkeys(int(i) for i in problem.first_stage_from_axes(design.points)))


# ---------------------------------------------------------------------------
# the outer loop
# ---------------------------------------------------------------------------

def _update_estimates(state, problem, cfg, rng, ixs):
    for ix in ixs:
        site = state.sites.get(ix)
        if site is None:
            continue
        n_ok = int(site.initialized.sum())
        if site.gap is None or n_ok < min(cfg.n0, site.n_scenarios) or n_ok < 2:
            continue
        values = _adjusted_values(site, allow_partial=True)
        state.gbar[ix] = float(problem.first_stage_cost(ix) + values.mean())
        state.variance[ix] = bootstrap_variance(values, cfg.T, rng)


def _fallback_incumbent(state, problem):
    """Best guess when no site finished its first visit."""
    best, best_val = None, np.inf
    for ix, site in state.sites.items():
        if site.initialized.any():
            val = plain_saa(site, problem)
        elif site.outputs is not None:
            val = problem.first_stage_cost(ix) + float(np.mean(site.outputs))
        else:
            continue
        if val < best_val:
            best, best_val = ix, val
    if best is None:
        best = next(iter(state.sites)) if state.sites else 0
    return best, float(best_val)


def run_algorithm1(problem: TwoStageProblem, cfg: AlgoConfig,
                   rng: Optional[np.random.Generator] = None,
                   meter: Optional[BudgetMeter] = None) -> RunRecord:
    """Run the global-local search until the budget ``cfg.C`` is spent."""
    cfg.validate()
    rng = make_rng(cfg.seed) if rng is None else rng
    meter = BudgetMeter(cfg.C) if meter is None else meter
    lcfg = cfg.local()
    state = GlobalState()
    n_init = cfg.n_initial if cfg.n_initial is not None else 10 * problem.first_stage_points.shape[1]
    batch = initial_sites(problem, n_init, rng)
    idle = 0
    truncated = False

    while state.current_iter < cfg.max_iter:
        state.current_iter += 1
        spent_before = meter.spent
        for ix in batch:
            if meter.exhausted:
                break
            site = state.sites.get(ix)
            if site is None:
                site = state.sites[ix] = new_site(ix, problem.scenario_dim)
            solve_second_stage(site, problem, meter, rng, lcfg)
        _update_estimates(state, problem, cfg, rng, batch)

        if state.gbar:
            inc = min(state.gbar, key=lambda i: (state.gbar[i], i))
            state.incumbent, state.incumbent_value = inc, state.gbar[inc]
            state.trace.append(TraceRow(state.current_iter, meter.spent, inc, state.incumbent_value))
        if meter.exhausted:
            break
        idle = idle + 1 if meter.spent == spent_before else 0
        if idle >= MAX_IDLE_ITERS:
            log.info("no simulations in %d consecutive iterations; stopping", idle)
            break

        if len(state.gbar) >= 2:
            model = fit_global(state, problem, rng=int(rng.integers(2**32)))
            f = sampling_distribution(model, state.incumbent_value, problem.first_stage_points)
        else:
            f = np.full(problem.n_first_stage, 1.0 / problem.n_first_stage)
        batch = draw_sites(f, cfg.s, rng)

    if state.incumbent is None:
        truncated = True
        ix, val = _fallback_incumbent(state, problem)
        state.incumbent, state.incumbent_value = ix, val
        state.trace.append(TraceRow(state.current_iter, meter.spent, ix, val))

    sites = {}
    for ix, site in state.sites.items():
        if ix in state.gbar:
            sites[ix] = SiteSummary(state.gbar[ix], plain_saa(site, problem), state.variance[ix],
                                    site.visits, int(site.initialized.sum()))
    return RunRecord(algo="ours", ix=state.incumbent,
                     x=problem.first_stage(state.incumbent).coords, gbar=state.incumbent_value,
                     spent=meter.spent, budget=meter.budget, truncated=truncated,
                     trace=state.trace, sites=sites)


# ---------------------------------------------------------------------------
# reporting oracle
# ---------------------------------------------------------------------------

def evaluate_true_objective(problem: TwoStageProblem, ix: int, N_B: int,
                            rng: Optional[np.random.Generator] = None,
                            scenarios: Optional[np.ndarray] = None) -> float:
    """SAA of G(x) with exact scenario-wise recourse; never charged to a budget."""
    if scenarios is None:
        if N_B < 1:
            raise ValueError("N_B must be at least 1")
        scenarios = problem.sample_scenarios(N_B, rng)
    _, vals = problem.second_stage_optimum(ix, scenarios)
    return float(problem.first_stage_cost(ix) + vals.mean())


class TrueObjective:
    """Cached oracle with one scenario set shared by every x (common random numbers)."""

    def __init__(self, problem: TwoStageProblem, N_B: int, seed: int = 20240601):
        self.problem = problem
        self.N_B = N_B
        self.seed = seed
        self._scen = None
        self._cache: Dict[int, float] = {}

    @property
    def scenarios(self) -> np.ndarray:
        if self._scen is None:
            self._scen = self.problem.sample_scenarios(self.N_B, make_rng(self.seed, 999_983))
        return self._scen

    def __call__(self, ix: int) -> float:
        ix = int(ix)
        if ix not in self._cache:
            self._cache[ix] = evaluate_true_objective(self.problem, ix, self.N_B, scenarios=self.scenarios)
        return self._cache[ix]
