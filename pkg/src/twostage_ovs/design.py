"""Space-filling designs and reproducible random streams."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import pdist

from .errors import DegenerateWeights, SizeTooLarge


@dataclass
class RngStream:
    """A generator keyed by ``(seed, stream_id)``.

    Streams with the same key replay the same draws; different
    ``stream_id`` values give independent streams through SeedSequence
    spawn keys, so macro-replications can run in any order or in parallel.
    """

    seed: int
    stream_id: int = 0
    _gen: Optional[np.random.Generator] = field(default=None, repr=False)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
            self._gen = np.random.default_rng(ss)
        return self._gen


def make_rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    return RngStream(seed, stream_id).generator


@dataclass
class LhdDesign:
    points: np.ndarray  # (size, d) integer indices into each grid axis
    size: int


def _random_lhd(axis_sizes: Sequence[Optional[int]], size: int, rng: np.random.Generator) -> np.ndarray:
    """One Latin hypercube; integer axes get grid indices, ``None`` axes unit values."""
    out = np.empty((size, len(axis_sizes)))
    for a, m in enumerate(axis_sizes):
        strata = rng.permutation(size)
        if m is None:
            out[:, a] = (strata + rng.random(size)) / size
        elif m >= size:
            # disjoint index blocks [ceil(k m / n), ceil((k+1) m / n) - 1]
            lo = np.ceil(strata * m / size).astype(int)
            hi = np.ceil((strata + 1) * m / size).astype(int)
            out[:, a] = lo + np.floor(rng.random(size) * (hi - lo))
        else:
            u = (strata + rng.random(size)) / size
            out[:, a] = np.minimum(np.floor(u * m), m - 1)
    return out


def _unit_coords(design: np.ndarray, axis_sizes: Sequence[Optional[int]]) -> np.ndarray:
    scale = np.array([1.0 if m is None else max(m - 1, 1) for m in axis_sizes])
    return design / scale


def _min_distance(design: np.ndarray, axis_sizes) -> float:
    if len(design) < 2:
        return math.inf
    return float(pdist(_unit_coords(design, axis_sizes)).min())


def _repair_duplicates(design, axis_sizes, rng):
    seen = set()
    for i, row in enumerate(design):
        key = tuple(row)
        while key in seen:
            row = np.array([rng.random() if m is None else rng.integers(m) for m in axis_sizes], dtype=float)
            key = tuple(row)
        design[i] = row
        seen.add(key)
    return design


def maximin_lhd_mixed(axis_sizes: Sequence[Optional[int]], size: int, rng: np.random.Generator,
                      n_candidates: int = 100) -> np.ndarray:
    """Best of ``n_candidates`` random LHDs by minimum pairwise distance.

    Distances are measured after scaling every axis to [0, 1].  Finite axes
    are given by their size and return integer indices (as floats);
    continuous axes are ``None`` and return stratified values in (0, 1).
    """
    best, best_d = None, -1.0
    for _ in range(max(1, n_candidates)):
        cand = _random_lhd(axis_sizes, size, rng)
        d = _min_distance(cand, axis_sizes)
        if d > best_d:
            best, best_d = cand, d
    if best_d == 0.0:
        best = _repair_duplicates(best, axis_sizes, rng)
    return best


def maximin_lhd(grid_axes: Sequence[Union[int, Sequence]], size: int, rng: np.random.Generator,
                n_candidates: int = 100) -> LhdDesign:
    """Maximin Latin hypercube over a finite product grid.

    Parameters
    ----------
    grid_axes : list
        Each entry is either an axis enumeration or its length.
    size : int
        Number of design points.

    Raises
    ------
    SizeTooLarge
        If ``size`` exceeds the number of grid points.
    """
    sizes = [a if isinstance(a, (int, np.integer)) else len(a) for a in grid_axes]
    if size < 1:
        raise ValueError("design size must be at least 1")
    if size > math.prod(sizes):
        raise SizeTooLarge(f"size {size} exceeds grid cardinality {math.prod(sizes)}")
    pts = maximin_lhd_mixed(sizes, size, rng, n_candidates)
    return LhdDesign(points=pts.astype(int), size=size)


def farthest_point_subset(points, size: int) -> np.ndarray:
    """Indices of a greedy farthest-point subset, starting from the first point.

    Each pick maximizes the Euclidean distance to the points already chosen,
    so dense clusters contribute few members.  Returned in increasing order.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(P)
    if size >= n:
        return np.arange(n)
    if size < 1:
        raise ValueError("size must be at least 1")
    chosen = [0]
    dist = ((P - P[0]) ** 2).sum(axis=1)
    for _ in range(size - 1):
        j = int(np.argmax(dist))
        chosen.append(j)
        dist = np.minimum(dist, ((P - P[j]) ** 2).sum(axis=1))
    return np.sort(np.array(chosen))


def sample_scenarios(problem, n: int, rng: np.random.Generator) -> np.ndarray:
    if n <= 0:
        return np.empty((0, problem.scenario_dim))
    return problem.sample_scenarios(n, rng)


def categorical_sample(weights, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` i.i.d. index draws from a discrete distribution.

    Raises
    ------
    DegenerateWeights
        If any weight is negative or NaN, or all weights are zero.
    """
    w = np.asarray(weights, dtype=float)
    if w.size == 0 or np.any(np.isnan(w)) or np.any(w < 0) or w.sum() <= 0:
        raise DegenerateWeights(f"invalid weights {w!r}")
    return rng.choice(w.size, size=count, p=w / w.sum())
