"""Comparison methods that share the problem interface and the budget meter.

* Random-sampling SAA draws first-stage points, scenarios and recourse
  decisions uniformly and keeps the best of everything it simulated.
* DLH-GPS collapses both stages into a single decision ``w = (x, y)`` with
  objective ``c0(x) + E[q(x, y, xi)]`` and searches it with a stochastic
  kriging model whose spatial variance is fixed, sampling new points from the
  posterior probability of improving on the best sample mean.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .algorithm import RunRecord, TraceRow, V_FLOOR_REL, sampling_distribution
from .design import categorical_sample, make_rng, maximin_lhd_mixed
from .errors import AllocationInfeasible, BudgetExhausted, ConfigError
from .kriging import fit_sk
from .problem import BudgetMeter, TwoStageProblem

log = logging.getLogger(__name__)

JOINT_ENUMERATION_LIMIT = 1_000_000
JOINT_POOL = 100_000


@dataclass
class RandomSaaConfig:
    C: int = 600
    N1: int = 10
    N2: int = 10
    seed: int = 0

    def validate(self) -> "RandomSaaConfig":
        if self.N1 < 1 or self.N2 < 1:
            raise ConfigError("N1 and N2 must be positive")
        if self.C // (self.N1 * self.N2) < 1:
            raise AllocationInfeasible(f"C={self.C} cannot fund N1*N2={self.N1 * self.N2} sub-searches")
        return self


def run_random_saa(problem: TwoStageProblem, cfg: RandomSaaConfig,
                   meter: Optional[BudgetMeter] = None,
                   rng: Optional[np.random.Generator] = None) -> RunRecord:
    """Uniform random search at both stages with an SAA estimate per first-stage draw.

    ``N1`` distinct first-stage points are drawn; each gets ``N2`` scenarios
    and, per scenario, ``floor(C / (N1 N2))`` distinct recourse decisions (all
    of Y(x) if it is smaller).  The first stage point with the lowest
    ``c0 + mean_j min_y q`` is returned.
    """
    cfg.validate()
    rng = make_rng(cfg.seed) if rng is None else rng
    meter = BudgetMeter(cfg.C) if meter is None else meter
    per = cfg.C // (cfg.N1 * cfg.N2)
    n1 = min(cfg.N1, problem.n_first_stage)
    xs = rng.choice(problem.n_first_stage, size=n1, replace=False)
    gbar: Dict[int, float] = {}
    trace: List[TraceRow] = []
    for k, ix in enumerate(xs, start=1):
        ix = int(ix)
        n_y = problem.second_stage_count(ix)
        xi = problem.sample_scenarios(cfg.N2, rng)
        best = np.empty(cfg.N2)
        for j in range(cfg.N2):
            ys = rng.choice(n_y, size=min(per, n_y), replace=False)
            meter.consume(len(ys))
            Y = problem.second_stage_points(ix, ys)
            best[j] = problem.response_batch(ix, Y, np.broadcast_to(xi[j], (len(ys), xi.shape[1]))).min()
        gbar[ix] = float(problem.first_stage_cost(ix) + best.mean())
        inc = min(gbar, key=lambda i: (gbar[i], i))
        trace.append(TraceRow(k, meter.spent, inc, gbar[inc]))
    inc = min(gbar, key=lambda i: (gbar[i], i))
    return RunRecord(algo="random-saa", ix=inc, x=problem.first_stage(inc).coords, gbar=gbar[inc],
                     spent=meter.spent, budget=meter.budget, trace=trace)


# ---------------------------------------------------------------------------
# deterministic look-ahead with GP-based search
# ---------------------------------------------------------------------------

@dataclass
class DlhGpsConfig:
    C: int = 600
    m: int = 10
    r: int = 10
    sigma_gps: float = 5.0
    a: float = 1.0
    n_initial: Optional[int] = None  # None means 10 * dim(w)
    seed: int = 0

    def validate(self) -> "DlhGpsConfig":
        if self.m < 1 or self.r < 1 or not self.sigma_gps > 0 or not self.a > 0:
            raise ConfigError("m and r must be positive integers and sigma_gps, a positive")
        return self


class JointSpace:
    """The joint decision set {(x, y): x in X, y in Y(x)} addressed by flat index."""

    def __init__(self, problem: TwoStageProblem):
        self.problem = problem
        self.counts = np.array([problem.second_stage_count(i) for i in range(problem.n_first_stage)])
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)])
        self.size = int(self.offsets[-1])
        xlo, xhi = problem.first_stage_bounds()
        ylo = np.min([problem.second_stage_bounds(i)[0] for i in range(problem.n_first_stage)], axis=0)
        yhi = np.max([problem.second_stage_bounds(i)[1] for i in range(problem.n_first_stage)], axis=0)
        self.lower = np.concatenate([xlo, ylo])
        self.upper = np.concatenate([xhi, yhi])
        self._all = None

    @property
    def dim(self) -> int:
        return len(self.lower)

    def split(self, k):
        k = np.asarray(k, dtype=np.int64)
        ix = np.searchsorted(self.offsets, k, side="right") - 1
        return ix, k - self.offsets[ix]

    def coords(self, k) -> np.ndarray:
        k = np.atleast_1d(np.asarray(k, dtype=np.int64))
        if self._all is not None:
            return self._all[k]
        ix, j = self.split(k)
        out = np.empty((len(k), self.dim))
        for i in np.unique(ix):
            sel = ix == i
            out[sel, :len(self.problem.first_stage_points[i])] = self.problem.first_stage_points[i]
            out[sel, self.problem.first_stage_points.shape[1]:] = self.problem.second_stage_points(int(i), j[sel])
        return out

    def all_coords(self) -> np.ndarray:
        if self._all is None:
            self._all = self.coords(np.arange(self.size))
        return self._all

    def from_unit(self, ix_axis: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Flat index of the ``u``-quantile position within Y(x) for each x index."""
        ix = np.asarray(ix_axis, dtype=int)
        j = np.minimum(np.floor(u * self.counts[ix]).astype(np.int64), self.counts[ix] - 1)
        return self.offsets[ix] + j


@dataclass
class _Obs:
    n: int = 0
    total: float = 0.0
    total_sq: float = 0.0

    def add(self, v: np.ndarray):
        self.n += len(v)
        self.total += float(v.sum())
        self.total_sq += float((v * v).sum())

    @property
    def mean(self) -> float:
        return self.total / self.n

    @property
    def var(self) -> float:
        if self.n < 2:
            return 0.0
        return max((self.total_sq - self.n * self.mean ** 2) / (self.n - 1), 0.0)


def _simulate_joint(space: JointSpace, k: int, r: int, meter, rng, obs: Dict[int, _Obs]):
    p = space.problem
    ix, j = space.split(np.array([k]))
    ix, j = int(ix[0]), int(j[0])
    r = min(r, meter.remaining)
    if r <= 0:
        raise BudgetExhausted("no budget left")
    meter.consume(r)
    xi = p.sample_scenarios(r, rng)
    y = p.second_stage_points(ix, np.array([j]))
    q = p.response_batch(ix, np.repeat(y, r, axis=0), xi)
    obs.setdefault(k, _Obs()).add(p.first_stage_cost(ix) + q)


def run_dlh_gps(problem: TwoStageProblem, cfg: DlhGpsConfig,
                meter: Optional[BudgetMeter] = None,
                rng: Optional[np.random.Generator] = None) -> RunRecord:
    """Search the joint space ``(x, y)`` by probability-of-improvement sampling.

    A maximin LHD over (x index, relative position in Y(x)) seeds the search;
    every sampled point gets ``r`` fresh scenarios.  The stochastic kriging
    model uses an exponential correlation ``exp(-a ||w - w'||)`` on normalized
    coordinates with spatial sd fixed at ``sigma_gps``.  The first-stage part of
    the point with the lowest sample mean is reported.
    """
    cfg.validate()
    rng = make_rng(cfg.seed) if rng is None else rng
    meter = BudgetMeter(cfg.C) if meter is None else meter
    space = JointSpace(problem)
    enumerate_all = space.size <= JOINT_ENUMERATION_LIMIT
    obs: Dict[int, _Obs] = {}
    trace: List[TraceRow] = []

    def incumbent():
        ok = [k for k, o in obs.items() if o.n >= min(cfg.r, 2)] or list(obs)
        return min(ok, key=lambda k: (obs[k].mean, k))

    n_init = cfg.n_initial if cfg.n_initial is not None else 10 * space.dim
    design = maximin_lhd_mixed([problem.n_first_stage, None], min(n_init, space.size), rng)
    batch = list(dict.fromkeys(int(k) for k in space.from_unit(design[:, 0].astype(int), design[:, 1])))
    it = 0
    try:
        while True:
            it += 1
            for k in batch:
                _simulate_joint(space, k, cfg.r, meter, rng, obs)
            best = incumbent()
            trace.append(TraceRow(it, meter.spent, int(space.split([best])[0][0]), obs[best].mean))
            if meter.exhausted:
                break
            keys = [k for k, o in obs.items() if o.n >= 2]
            if len(keys) >= 2:
                W = space.coords(keys)
                G = np.array([obs[k].mean for k in keys])
                V = np.array([obs[k].var / obs[k].n for k in keys])
                V = np.maximum(V, V_FLOOR_REL * np.var(G))
                model = fit_sk(W, G, V, lower=space.lower, upper=space.upper, kind="exponential",
                               tau2=cfg.sigma_gps ** 2, phi=np.full(space.dim, cfg.a ** 2))
                if enumerate_all:
                    pool = None
                    f = sampling_distribution(model, obs[best].mean, space.all_coords())
                else:
                    pool = rng.integers(0, space.size, size=JOINT_POOL)
                    f = sampling_distribution(model, obs[best].mean, space.coords(pool))
                draws = categorical_sample(f, cfg.m, rng)
                batch = [int(d) for d in draws] if pool is None else [int(pool[d]) for d in draws]
            else:
                batch = [int(k) for k in rng.integers(0, space.size, size=cfg.m)]
    except BudgetExhausted:
        pass
    best = incumbent()
    ix = int(space.split([best])[0][0])
    if not trace or trace[-1].ix != ix or trace[-1].spent != meter.spent:
        trace.append(TraceRow(it, meter.spent, ix, obs[best].mean))
    return RunRecord(algo="dlh-gps", ix=ix, x=problem.first_stage(ix).coords, gbar=obs[best].mean,
                     spent=meter.spent, budget=meter.budget, trace=trace)
