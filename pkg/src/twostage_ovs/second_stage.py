"""Metamodel-assisted search over the recourse set Y(x), one first-stage site at a time.

A :class:`SiteState` owns the scenarios drawn at one first-stage decision,
the local kriging model over ``z = (y, xi)``, and per-scenario incumbents.
:func:`solve_second_stage` runs an expected-improvement search for every
scenario that has not met the relative-EI stopping rule, and
:func:`estimate_gap` turns posterior sample paths into an estimate of each
incumbent's optimality gap.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Union

import numpy as np
from scipy import linalg
from scipy.stats import norm

from .design import farthest_point_subset, maximin_lhd_mixed
from .errors import BudgetExhausted, NonFiniteInput, SingularCorrelation, SingularCovariance
from .kriging import N_STARTS, KrigingModel, fit_kriging
from .problem import BudgetMeter, TwoStageProblem

log = logging.getLogger(__name__)

EPS_DEN = 1e-8
REFIT_EVERY = 10
MAX_POSTERIOR_ENTRIES = 1_000_000
SUBSAMPLE_POOL = 100_000
GAP_SD_MULT = 6.0
GAP_MAX_CANDIDATES = 500
EXACT_LIMIT = 200
NEIGHBOURS = 100
NEIGHBOUR_REFIT_STARTS = 2


@dataclass
class LocalSearchConfig:
    """Knobs of the local search.  ``alpha0``, ``n0`` and ``g`` set the visit schedule."""

    alpha0: float = 0.1
    n0: int = 10
    g: float = 1.5
    B: int = 100
    design_per_dim: float = 10.0
    design_cap: int = 200
    design_cap_per_y: int = 5
    refit_every: int = REFIT_EVERY
    refit_starts: int = 0
    lhd_candidates: int = 100
    exact_limit: int = EXACT_LIMIT
    neighbours: int = NEIGHBOURS

    def alpha(self, visits: int) -> float:
        return self.alpha0 * self.g ** (-(visits - 1) / 2.0)

    def n_scenarios(self, visits: int) -> int:
        # round away float noise before the ceiling so that e.g. 10 * 1.5**2 stays 23
        return int(math.ceil(round(self.n0 * self.g ** (visits - 1), 9)))


@dataclass
class EiEvaluation:
    y: int
    ei: float
    posterior_mean: float
    posterior_sd: float


@dataclass
class SiteState:
    """Everything the search has learned at one first-stage decision."""

    ix: int
    scenarios: np.ndarray  # (N, d_xi)
    inc_idx: np.ndarray  # flat index into Y(x); -1 until initialized
    inc_val: np.ndarray
    terminated: np.ndarray
    alpha: float = 0.0
    visits: int = 0
    design: np.ndarray = None  # (K1, d_y + d_xi) raw coordinates
    outputs: np.ndarray = None
    gap: np.ndarray = None
    model: Optional[Union[KrigingModel, "NeighbourModel"]] = None
    tried: List[Set[int]] = field(default_factory=list)
    seen: Dict[bytes, float] = field(default_factory=dict, repr=False)
    sims: int = 0
    truncated: bool = False
    since_refit: int = 0
    n_ei_sims: int = 0

    @property
    def n_scenarios(self) -> int:
        return len(self.scenarios)

    @property
    def initialized(self) -> np.ndarray:
        return self.inc_idx >= 0

    @property
    def complete(self) -> bool:
        return (self.model is not None and self.n_scenarios > 0 and bool(self.initialized.all())
                and self.gap is not None and len(self.gap) == self.n_scenarios)


def new_site(ix: int, d_xi: int) -> SiteState:
    return SiteState(ix=ix, scenarios=np.empty((0, d_xi)), inc_idx=np.empty(0, dtype=int),
                     inc_val=np.empty(0), terminated=np.empty(0, dtype=bool))


# ---------------------------------------------------------------------------
# expected improvement
# ---------------------------------------------------------------------------

def expected_improvement(incumbent_value, mean, sd):
    """Closed-form EI of a normal posterior relative to a minimization incumbent.

    ``EI = D Phi(D/s) + s phi(D/s)`` with ``D = incumbent - mean``; ``max(D, 0)``
    when ``s = 0``.  Works elementwise on arrays.

    Raises
    ------
    NonFiniteInput
        If any input is NaN or infinite, or ``sd`` is negative.
    """
    inc = np.asarray(incumbent_value, dtype=float)
    mu = np.asarray(mean, dtype=float)
    s = np.asarray(sd, dtype=float)
    if not (np.all(np.isfinite(inc)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(s))):
        raise NonFiniteInput("expected_improvement got a non-finite input")
    if np.any(s < 0):
        raise NonFiniteInput("posterior sd must be nonnegative")
    delta = inc - mu
    pos = s > 0
    safe = np.where(pos, s, 1.0)
    with np.errstate(over="ignore"):
        t = delta / safe
    ei = np.where(pos, delta * norm.cdf(t) + safe * norm.pdf(t), np.maximum(delta, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def _z(problem: TwoStageProblem, ix: int, y_idx: np.ndarray, xi: np.ndarray) -> np.ndarray:
    Y = problem.second_stage_points(ix, np.asarray(y_idx, dtype=int))
    return np.hstack([Y, np.broadcast_to(xi, (len(Y), len(xi)))])


def ei_argmax(model: KrigingModel, problem: TwoStageProblem, ix: int, xi: np.ndarray,
              candidates: np.ndarray, incumbent: float) -> EiEvaluation:
    """Maximize EI over ``candidates`` (flat indices into Y(x)) at scenario ``xi``.

    Ties go to the earliest candidate in the given order.
    """
    candidates = np.asarray(candidates, dtype=int)
    if candidates.size == 0:
        raise ValueError("no candidates")
    mean, var = model.predict(_z(problem, ix, candidates, xi))
    sd = np.sqrt(var)
    ei = np.atleast_1d(expected_improvement(incumbent, mean, sd))
    k = int(np.argmax(ei))
    return EiEvaluation(int(candidates[k]), float(ei[k]), float(mean[k]), float(sd[k]))


def relative_ei(ei: float, incumbent_value: float) -> float:
    return ei / max(abs(incumbent_value), EPS_DEN)


def stopping_satisfied(site_or_alpha, ei: float, incumbent_value: float) -> bool:
    """Relative-EI stopping rule: ``ei / max(|incumbent|, 1e-8) <= alpha``."""
    alpha = site_or_alpha.alpha if isinstance(site_or_alpha, SiteState) else float(site_or_alpha)
    return relative_ei(ei, incumbent_value) <= alpha


# ---------------------------------------------------------------------------
# large designs
# ---------------------------------------------------------------------------

@dataclass
class NeighbourModel:
    """Local model for designs too large to krige exactly.

    Correlation weights ``phi`` are shared by the whole design (estimated on a
    subset); predictions at a scenario ``xi`` use an exact kriging model built
    from the ``k`` design points whose scenario coordinates are closest to
    ``xi`` in the ``phi``-weighted metric.  Every point simulated at ``xi``
    itself is at distance zero and therefore always included.
    """

    design: np.ndarray
    outputs: np.ndarray
    phi: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    d_y: int
    k: int

    @property
    def n(self) -> int:
        return len(self.outputs)

    def neighbours(self, xi: np.ndarray) -> np.ndarray:
        if self.n <= self.k:
            return np.arange(self.n)
        lo, hi = self.lower[self.d_y:], self.upper[self.d_y:]
        scale = np.where(hi > lo, hi - lo, 1.0)
        diff = (self.design[:, self.d_y:] - np.asarray(xi, dtype=float)) / scale
        dist = diff ** 2 @ self.phi[self.d_y:]
        return np.sort(np.argpartition(dist, self.k - 1)[:self.k])

    def at(self, xi: np.ndarray) -> KrigingModel:
        idx = self.neighbours(xi)
        return fit_kriging(self.design[idx], self.outputs[idx], self.lower, self.upper, phi=self.phi)


def model_at(model, xi: np.ndarray) -> KrigingModel:
    """The kriging model that answers queries at scenario ``xi``."""
    return model.at(xi) if isinstance(model, NeighbourModel) else model


# ---------------------------------------------------------------------------
# the local search
# ---------------------------------------------------------------------------

def local_design_size(problem: TwoStageProblem, ix: int, cfg: LocalSearchConfig) -> int:
    d = problem.second_stage_bounds(ix)[0].size + problem.scenario_dim
    n = int(round(cfg.design_per_dim * d))
    return max(2, min(n, cfg.design_cap, cfg.design_cap_per_y * problem.second_stage_count(ix)))


def _bounds(problem, ix):
    ylo, yhi = problem.second_stage_bounds(ix)
    xlo, xhi = problem.scenario_bounds()
    return np.concatenate([ylo, xlo]), np.concatenate([yhi, xhi])


class _Local:
    """Bookkeeping shared by the steps of one ``solve_second_stage`` call."""

    def __init__(self, site, problem, meter, rng, cfg):
        self.site, self.problem, self.meter, self.rng, self.cfg = site, problem, meter, rng, cfg
        self.x = problem.first_stage(site.ix)
        self.lower, self.upper = _bounds(problem, site.ix)
        self.n_y = problem.second_stage_count(site.ix)

    def simulate(self, y_idx: int, xi: np.ndarray) -> float:
        """Simulate ``(y, xi)`` once; a repeated point reuses its recorded output for free."""
        p, site = self.problem, self.site
        y = p.second_stage_points(site.ix, np.array([y_idx]))[0]
        z = np.concatenate([y, xi])[None, :]
        key = z.tobytes()
        if key in site.seen:
            return site.seen[key]
        if not p.is_feasible(site.ix, y):
            raise ValueError(f"candidate {y_idx} infeasible at site {site.ix}")
        self.meter.consume()
        q = float(p.response(site.ix, y, xi))
        site.seen[key] = q
        site.sims += 1
        site.design = z if site.design is None else np.vstack([site.design, z])
        site.outputs = np.array([q]) if site.outputs is None else np.append(site.outputs, q)
        site.since_refit += 1
        return q

    def refit(self, force=False):
        site, cfg = self.site, self.cfg
        n = len(site.outputs)
        if n > cfg.exact_limit:
            self._refit_neighbour(force)
            return
        if site.model is None or force or site.since_refit >= cfg.refit_every:
            phi0 = None if site.model is None else site.model.phi
            # refits start from the previous estimate and need fewer quasi-random starts
            starts = N_STARTS if phi0 is None else cfg.refit_starts
            site.model = fit_kriging(site.design, site.outputs, lower=self.lower, upper=self.upper,
                                     rng=int(self.rng.integers(2**32)), phi0=phi0, n_starts=starts)
            site.since_refit = 0
        else:
            n_old = site.model.n
            try:
                site.model = site.model.append(site.design[n_old:], site.outputs[n_old:])
            except SingularCorrelation:
                self.refit(force=True)

    def _refit_neighbour(self, force):
        site, cfg = self.site, self.cfg
        n = len(site.outputs)
        model = site.model
        # likelihood refits on a subset; their spacing grows with the design
        due = site.since_refit >= max(cfg.refit_every, n // 10)
        if force or due or not isinstance(model, NeighbourModel):
            # a space-filling subset keeps piles of near-identical points from dominating the likelihood
            sub = farthest_point_subset((site.design - self.lower) / (self.upper - self.lower), cfg.exact_limit)
            phi0 = None if model is None else model.phi
            # each subset is new data, so the search restarts instead of only refining phi0
            starts = N_STARTS if phi0 is None else NEIGHBOUR_REFIT_STARTS
            fit = fit_kriging(site.design[sub], site.outputs[sub], lower=self.lower, upper=self.upper,
                              rng=int(self.rng.integers(2**32)), phi0=phi0, n_starts=starts)
            phi = fit.phi
            site.since_refit = 0
        else:
            phi = model.phi
        d_y = len(self.lower) - self.problem.scenario_dim
        site.model = NeighbourModel(site.design, site.outputs, phi, self.lower, self.upper, d_y,
                                    cfg.neighbours)

    def candidates(self, j: int) -> np.ndarray:
        tried = self.site.tried[j]
        n_y = self.n_y
        if n_y * self.site.n_scenarios > MAX_POSTERIOR_ENTRIES and n_y > SUBSAMPLE_POOL:
            pool = np.unique(self.rng.choice(n_y, size=SUBSAMPLE_POOL, replace=False))
        else:
            pool = np.arange(n_y)
        if tried:
            pool = pool[~np.isin(pool, np.fromiter(tried, dtype=int))]
        return pool


def _initial_design(L: _Local):
    site, p, cfg = L.site, L.problem, L.cfg
    n = local_design_size(p, site.ix, cfg)
    axes = list(p.second_stage_axes(site.ix)) + [None] * p.scenario_dim
    pts = maximin_lhd_mixed(axes, n, L.rng, cfg.lhd_candidates)
    n_yax = len(axes) - p.scenario_dim
    y_idx = p.second_stage_from_axes(site.ix, pts[:, :n_yax].astype(int))
    u = np.clip(pts[:, n_yax:], 1e-12, 1 - 1e-12)
    xi = p.scenario_quantile(u)
    for j, x in zip(y_idx, xi):
        L.simulate(int(j), x)


def _init_incumbent(L: _Local, j: int):
    site = L.site
    xi = site.scenarios[j]
    cand = L.candidates(j)
    mean, _ = model_at(site.model, xi).predict(_z(L.problem, site.ix, cand, xi))
    y = int(cand[int(np.argmin(mean))])
    q = L.simulate(y, xi)
    site.tried[j].add(y)
    site.inc_idx[j], site.inc_val[j] = y, q
    L.refit()


def _add_scenarios(L: _Local, n_new: int):
    site = L.site
    if n_new <= 0:
        return
    xi = L.problem.sample_scenarios(n_new, L.rng)
    site.scenarios = np.vstack([site.scenarios, xi])
    site.inc_idx = np.append(site.inc_idx, np.full(n_new, -1))
    site.inc_val = np.append(site.inc_val, np.full(n_new, np.inf))
    site.terminated = np.append(site.terminated, np.zeros(n_new, dtype=bool))
    site.tried.extend(set() for _ in range(n_new))


def solve_second_stage(site: SiteState, problem: TwoStageProblem, meter: BudgetMeter,
                       rng: np.random.Generator, cfg: Optional[LocalSearchConfig] = None) -> SiteState:
    """One visit of the local search at ``site`` (mutated in place and returned).

    The first visit draws ``n0`` scenarios, simulates an initial maximin LHD
    over Y(x) x Xi and fits the local model; later visits shrink the stopping
    threshold by ``g**-0.5`` and grow the scenario set to ``ceil(n0 g**(t-1))``.
    New scenarios get an incumbent at the posterior-mean minimizer, which is
    then simulated.  Each open scenario then alternates EI maximization and
    simulation until its relative EI drops to the threshold.  Gap estimates
    are refreshed for every scenario at the end.

    Budget exhaustion ends the visit early and sets ``site.truncated``.
    """
    cfg = cfg or LocalSearchConfig()
    L = _Local(site, problem, meter, rng, cfg)
    site.visits += 1
    site.alpha = cfg.alpha(site.visits)
    site.terminated[:] = False
    _add_scenarios(L, cfg.n_scenarios(site.visits) - site.n_scenarios)
    try:
        if site.model is None:
            if site.design is not None:
                raise BudgetExhausted("initial design was cut short on an earlier visit")
            _initial_design(L)
            L.refit(force=True)
        for j in np.flatnonzero(~site.initialized):
            _init_incumbent(L, int(j))
        _ei_loop(L)
    except BudgetExhausted:
        site.truncated = True
        log.debug("budget exhausted at site %d after %d simulations", site.ix, site.sims)
    if site.model is not None and site.model.n < len(site.outputs):
        L.refit()
    if site.model is not None and site.initialized.any():
        refresh_gaps(site, problem, rng, cfg.B)
    return site


def _ei_loop(L: _Local):
    site = L.site
    while True:
        open_ = np.flatnonzero(~site.terminated)
        if open_.size == 0:
            return
        for j in open_:
            j = int(j)
            cand = L.candidates(j)
            if len(site.tried[j]) >= L.n_y or cand.size == 0:
                site.terminated[j] = True
                continue
            xi = site.scenarios[j]
            ev = ei_argmax(model_at(site.model, xi), L.problem, site.ix, xi, cand, site.inc_val[j])
            if stopping_satisfied(site.alpha, ev.ei, site.inc_val[j]):
                site.terminated[j] = True
                continue
            q = L.simulate(ev.y, xi)
            site.tried[j].add(ev.y)
            site.n_ei_sims += 1
            if q < site.inc_val[j]:
                site.inc_idx[j], site.inc_val[j] = ev.y, q
            L.refit()


# ---------------------------------------------------------------------------
# optimality gaps
# ---------------------------------------------------------------------------

def _paths_with_fallback(model, Z, B, rng):
    try:
        return model.sample_paths(Z, B, rng)
    except SingularCovariance:
        mean, cov = model.posterior_cov(Z)
        w, U = linalg.eigh(cov)
        log.info("posterior covariance factorized by eigendecomposition (%d points)", len(Z))
        return mean + (rng.standard_normal((B, len(mean))) * np.sqrt(np.maximum(w, 0.0))) @ U.T


def estimate_gap(model: KrigingModel, problem: TwoStageProblem, ix: int, xi: np.ndarray,
                 incumbent_value: float, B: int, rng: np.random.Generator,
                 candidates: Optional[np.ndarray] = None) -> float:
    """Posterior-path estimate of the optimality gap of an incumbent at scenario ``xi``.

    Each path is a joint draw of the response over the candidate set at
    ``xi``; its gap is ``max(0, incumbent - min(path))``.  Candidates whose
    lower bound ``mean - 6 sd`` is not below the incumbent cannot contribute
    and are skipped, and path values are floored at that bound.  At most 500
    candidates with the lowest bounds are kept.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    n_y = problem.second_stage_count(ix)
    if candidates is None:
        if n_y > MAX_POSTERIOR_ENTRIES:
            candidates = np.unique(rng.choice(n_y, size=SUBSAMPLE_POOL, replace=False))
        else:
            candidates = np.arange(n_y)
    Z = _z(problem, ix, candidates, xi)
    mean, var = model.predict(Z)
    lb = mean - GAP_SD_MULT * np.sqrt(var)
    keep = np.flatnonzero(lb < incumbent_value)
    if keep.size == 0:
        return 0.0
    if keep.size > GAP_MAX_CANDIDATES:
        keep = keep[np.argsort(lb[keep], kind="stable")[:GAP_MAX_CANDIDATES]]
    paths = _paths_with_fallback(model, Z[keep], B, rng)
    paths = np.maximum(paths, lb[keep])
    return float(np.mean(np.maximum(incumbent_value - paths.min(axis=1), 0.0)))


def refresh_gaps(site: SiteState, problem: TwoStageProblem, rng: np.random.Generator, B: int):
    gap = np.zeros(site.n_scenarios)
    for j in np.flatnonzero(site.initialized):
        gap[j] = estimate_gap(model_at(site.model, site.scenarios[j]), problem, site.ix, site.scenarios[j], site.inc_val[j], B, rng)
    site.gap = gap
