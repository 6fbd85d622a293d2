"""Two-stage problem interface and the budget-metered simulation wrapper.

Every algorithm in the package talks to a problem through
:class:`TwoStageProblem` and pays for each call of ``response`` through a
shared :class:`BudgetMeter`.  Decisions are addressed by their position in
the finite enumerations X and Y(x); coordinates are only materialized when a
metamodel or the simulator needs them.
"""

from __future__ import annotations

import abc
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import BudgetExhausted, InfeasibleDecision


@dataclass(frozen=True)
class FirstStageDecision:
    index: int
    coords: Tuple[float, ...]


@dataclass(frozen=True)
class SecondStageDecision:
    index: int
    coords: Tuple[float, ...]


class BudgetMeter:
    """Counts response evaluations against the simulation budget C.

    ``consume`` is atomic so concurrent sub-searches can share one meter.
    """

    def __init__(self, budget: int):
        if budget < 0:
            raise ValueError("budget must be nonnegative")
        self.budget = int(budget)
        self.spent = 0
        self._lock = threading.Lock()

    def consume(self, units: int = 1) -> None:
        with self._lock:
            if self.spent + units > self.budget:
                raise BudgetExhausted(
                    f"budget {self.budget} exhausted (spent {self.spent})"
                )
            self.spent += units

    @property
    def remaining(self) -> int:
        return self.budget - self.spent

    @property
    def exhausted(self) -> bool:
        return self.spent >= self.budget

    def __repr__(self) -> str:
        return f"BudgetMeter(budget={self.budget}, spent={self.spent})"


class TwoStageProblem(abc.ABC):
    """A two-stage stochastic program with a black-box second-stage response.

    Subclasses enumerate the finite first-stage set X (``first_stage_points``)
    and, for each first-stage index, the finite recourse set Y(x).  The
    response ``q(x, y, xi)`` must be deterministic and side-effect free.
    """

    name = "abstract"
    scenario_dim = 1
    first_stage_points: np.ndarray

    # -- first stage ------------------------------------------------------
    @property
    def n_first_stage(self) -> int:
        return len(self.first_stage_points)

    def first_stage(self, ix: int) -> FirstStageDecision:
        return FirstStageDecision(int(ix), tuple(float(v) for v in self.first_stage_points[ix]))

    def first_stage_set(self) -> Iterator[FirstStageDecision]:
        for ix in range(self.n_first_stage):
            yield self.first_stage(ix)

    def first_stage_axes(self) -> List[int]:
        """Axis sizes for space-filling designs over X (a single axis by default)."""
        return [self.n_first_stage]

    def first_stage_from_axes(self, axis_idx: np.ndarray) -> np.ndarray:
        return np.asarray(axis_idx)[:, 0].astype(int)

    def first_stage_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        pts = self.first_stage_points
        return pts.min(axis=0), pts.max(axis=0)

    @abc.abstractmethod
    def first_stage_cost(self, ix: int) -> float:
        """The deterministic first-stage cost c0(x)."""

    # -- second stage -----------------------------------------------------
    @abc.abstractmethod
    def second_stage_count(self, ix: int) -> int:
        """|Y(x)|."""

    @abc.abstractmethod
    def second_stage_points(self, ix: int, idx: Optional[np.ndarray] = None) -> np.ndarray:
        """Coordinates of Y(x) (all of it, or the rows selected by ``idx``)."""

    @abc.abstractmethod
    def second_stage_axes(self, ix: int) -> List[int]:
        """Axis sizes of a product-like parametrization of Y(x) used for LHDs."""

    @abc.abstractmethod
    def second_stage_from_axes(self, ix: int, axis_idx: np.ndarray) -> np.ndarray:
        """Map per-axis indices (rows of ``axis_idx``) to flat indices into Y(x)."""

    @abc.abstractmethod
    def second_stage_bounds(self, ix: int) -> Tuple[np.ndarray, np.ndarray]:
        """Coordinate box of Y(x), used to normalize metamodel inputs."""

    @abc.abstractmethod
    def is_feasible(self, ix: int, y: Sequence[float]) -> bool:
        pass

    def second_stage(self, ix: int, j: int) -> SecondStageDecision:
        coords = self.second_stage_points(ix, np.array([j]))[0]
        return SecondStageDecision(int(j), tuple(float(v) for v in coords))

    def second_stage_set(self, ix: int) -> Iterator[SecondStageDecision]:
        pts = self.second_stage_points(ix)
        for j, row in enumerate(pts):
            yield SecondStageDecision(j, tuple(float(v) for v in row))

    # -- scenarios --------------------------------------------------------
    @abc.abstractmethod
    def sample_scenarios(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` i.i.d. scenarios as an ``(n, scenario_dim)`` array."""

    @abc.abstractmethod
    def scenario_quantile(self, u: np.ndarray) -> np.ndarray:
        """Inverse CDF applied column-wise to ``u`` in (0, 1)."""

    def scenario_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo = self.scenario_quantile(np.full((1, self.scenario_dim), 0.01))[0]
        hi = self.scenario_quantile(np.full((1, self.scenario_dim), 0.99))[0]
        return lo, hi

    # -- response ---------------------------------------------------------
    @abc.abstractmethod
    def response(self, ix: int, y: np.ndarray, xi: np.ndarray) -> float:
        """The second-stage cost q(x, y, xi) for one (y, xi) pair."""

    def response_batch(self, ix: int, Y: np.ndarray, Xi: np.ndarray) -> np.ndarray:
        """Responses for paired rows of ``Y`` and ``Xi``."""
        return np.array([self.response(ix, y, xi) for y, xi in zip(Y, Xi)])

    def response_grid(self, ix: int, Y: np.ndarray, Xi: np.ndarray) -> np.ndarray:
        """Responses for every combination, shape ``(len(Xi), len(Y))``."""
        out = np.empty((len(Xi), len(Y)))
        for a, xi in enumerate(Xi):
            out[a] = self.response_batch(ix, Y, np.broadcast_to(xi, (len(Y), len(xi))))
        return out

    def second_stage_optimum(self, ix: int, scenarios: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Exact scenario-wise optimum over Y(x) by exhaustive enumeration.

        Returns the minimizing flat indices (first in enumeration order on
        ties) and the optimal values.
        """
        return brute_force_optimum(self, ix, scenarios)


def brute_force_optimum(problem: TwoStageProblem, ix: int, scenarios: np.ndarray,
                        chunk: int = 4096) -> Tuple[np.ndarray, np.ndarray]:
    scenarios = np.atleast_2d(scenarios)
    n_y = problem.second_stage_count(ix)
    best_val = np.full(len(scenarios), np.inf)
    best_idx = np.zeros(len(scenarios), dtype=int)
    for start in range(0, n_y, chunk):
        idx = np.arange(start, min(start + chunk, n_y))
        vals = problem.response_grid(ix, problem.second_stage_points(ix, idx), scenarios)
        j = np.argmin(vals, axis=1)
        v = vals[np.arange(len(scenarios)), j]
        better = v < best_val
        best_val[better] = v[better]
        best_idx[better] = idx[j[better]]
    return best_idx, best_val


def metered_response(meter: BudgetMeter, problem: TwoStageProblem,
                     x: FirstStageDecision, y: SecondStageDecision,
                     xi: np.ndarray) -> float:
    """Evaluate q(x, y, xi) and charge one unit of budget.

    Raises
    ------
    InfeasibleDecision
        If ``y`` is not a member of Y(x).  Nothing is charged.
    BudgetExhausted
        If the meter is already at its budget.  Nothing is evaluated.
    """
    y_coords = np.asarray(y.coords, dtype=float)
    if not problem.is_feasible(x.index, y_coords):
        raise InfeasibleDecision(f"{y.coords} is not in Y({x.coords})")
    meter.consume()
    return float(problem.response(x.index, y_coords, np.asarray(xi, dtype=float)))


def enumerate_feasible_pairs(problem: TwoStageProblem, x: FirstStageDecision) -> List[SecondStageDecision]:
    """Full, duplicate-free enumeration of Y(x) in the problem's fixed order."""
    return list(problem.second_stage_set(x.index))


PROBLEMS: Dict[str, Callable[..., TwoStageProblem]] = {}


def register_problem(name: str):
    def deco(factory):
        PROBLEMS[name] = factory
        return factory
    return deco


def make_problem(name: str, **params) -> TwoStageProblem:
    # benchmark problems register themselves on import
    from . import problems  # noqa: F401

    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; known: {sorted(PROBLEMS)}") from None
    return factory(**params)
