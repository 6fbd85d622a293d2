"""Kriging metamodels with a constant trend.

Two flavours share one linear-algebra core:

* :func:`fit_kriging` interpolates deterministic responses (the local model
  over ``z = (y, xi)``); the trend and spatial variance are profiled out of
  the likelihood in closed form.
* :func:`fit_sk` is stochastic kriging for noisy outputs with a known
  diagonal noise matrix ``V`` (the global model over first-stage points).

Inputs are rescaled to ``[0, 1]`` per axis before correlations are computed,
so fitted ``phi`` values are in normalized units.  Internally the covariance
of the observations is ``sigma2 * C`` with ``C = R + diag(V / sigma2) + jitter I``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import linalg, optimize
from scipy.linalg import lapack
from scipy.stats import qmc

from .errors import (DimensionMismatch, DuplicatePoints, SingularCorrelation,
                     SingularCovariance, SingularSystem)

log = logging.getLogger(__name__)

LOG_PHI_BOUNDS = (np.log(1e-3), np.log(1e3))
JITTERS = (1e-10, 1e-8, 1e-6)
N_STARTS = 8
GRID_LOG_PHI = np.linspace(LOG_PHI_BOUNDS[0], LOG_PHI_BOUNDS[1], 9)
KERNELS = ("gaussian", "exponential")


@dataclass(frozen=True)
class Correlation:
    """Product-form correlation with positive per-axis weights ``phi``."""

    phi: np.ndarray
    kind: str = "gaussian"

    def __post_init__(self):
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        if np.any(~(phi > 0)):
            raise ValueError("correlation weights must be positive")
        if self.kind not in KERNELS:
            raise ValueError(f"unknown correlation kind {self.kind!r}")
        object.__setattr__(self, "phi", phi)

    def __call__(self, A, B=None) -> np.ndarray:
        return correlation_matrix(self.phi, A, B, kind=self.kind)


def _sq_dist(phi, A, B):
    # sum_j phi_j (a_j - b_j)^2 via the expansion, clipped at 0 for rounding
    As = A * np.sqrt(phi)
    Bs = B * np.sqrt(phi)
    d2 = (As * As).sum(1)[:, None] + (Bs * Bs).sum(1)[None, :] - 2.0 * As @ Bs.T
    return np.maximum(d2, 0.0)


def correlation_matrix(phi, A, B=None, kind: str = "gaussian") -> np.ndarray:
    """Correlations between the rows of ``A`` and ``B`` (``B = A`` if omitted).

    ``kind="gaussian"`` gives ``exp(-sum_j phi_j (a_j - b_j)^2)`` and
    ``kind="exponential"`` gives ``exp(-sqrt(sum_j phi_j (a_j - b_j)^2))``.

    Raises
    ------
    DimensionMismatch
        If the point dimension differs from ``len(phi)``.
    """
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    sym = B is None
    B = A if sym else np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != phi.size or B.shape[1] != phi.size:
        raise DimensionMismatch(f"points of dim {A.shape[1]}/{B.shape[1]} vs phi of length {phi.size}")
    if sym:
        diff = A[:, None, :] - A[None, :, :]
        d2 = np.einsum("ijk,k->ij", diff * diff, phi) if len(A) <= 400 else _sq_dist(phi, A, A)
        np.fill_diagonal(d2, 0.0)
        d2 = 0.5 * (d2 + d2.T)
    else:
        d2 = _sq_dist(phi, A, B)
    if kind == "gaussian":
        return np.exp(-d2)
    if kind == "exponential":
        return np.exp(-np.sqrt(d2))
    raise ValueError(f"unknown correlation kind {kind!r}")


def _chol(M: np.ndarray, jitters=JITTERS, scale: float = 1.0, err=SingularCorrelation):
    """Cholesky of ``M + j * scale * I`` for the first jitter ``j`` that works."""
    eye = np.eye(len(M))
    for j in jitters:
        try:
            return linalg.cholesky(M + (j * scale) * eye, lower=True, check_finite=False), j
        except linalg.LinAlgError:
            continue
    raise err(f"matrix not positive definite after jitter {jitters[-1]:g}")


@dataclass
class KrigingModel:
    """A fitted constant-trend kriging model (deterministic outputs)."""

    design: np.ndarray  # raw (un-normalized) design points, (n, d)
    outputs: np.ndarray
    beta0: float
    sigma2: float
    corr: Correlation
    lower: np.ndarray
    scale: np.ndarray
    chol: np.ndarray
    jitter: float
    nugget: Optional[np.ndarray] = None  # V / sigma2 on the diagonal, if noisy
    clamp_count: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    # -- derived linear-algebra pieces ------------------------------------
    @property
    def phi(self) -> np.ndarray:
        return self.corr.phi

    @property
    def n(self) -> int:
        return len(self.outputs)

    def normalize(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if Z.shape[1] != len(self.lower):
            raise DimensionMismatch(f"expected points of dim {len(self.lower)}, got {Z.shape[1]}")
        return (Z - self.lower) / self.scale

    @property
    def unit_design(self) -> np.ndarray:
        if "U" not in self._cache:
            self._cache["U"] = self.normalize(self.design)
        return self._cache["U"]

    def _solve(self, b):
        return linalg.cho_solve((self.chol, True), b, check_finite=False)

    @property
    def _w(self):
        # L^{-1} 1 and 1' C^{-1} 1
        if "w" not in self._cache:
            w = linalg.solve_triangular(self.chol, np.ones(self.n), lower=True, check_finite=False)
            self._cache["w"] = w
            self._cache["one_c_one"] = float(w @ w)
        return self._cache["w"]

    @property
    def one_c_one(self) -> float:
        self._w
        return self._cache["one_c_one"]

    @property
    def alpha(self):
        if "alpha" not in self._cache:
            self._cache["alpha"] = self._solve(self.outputs - self.beta0)
        return self._cache["alpha"]

    def _cross(self, U):
        r = self.corr(U, self.unit_design)
        # an exact design-point match sees the same numerical jitter as C
        if self.jitter > 0:
            r[r > 1.0 - 1e-12] += self.jitter
        return r

    def _exact_rows(self, U, r):
        """Rows of ``U`` that coincide with a noise-free design point, and which point."""
        rows, cols = np.nonzero(r > 1.0 - 1e-14)
        if rows.size == 0:
            return rows, cols
        ok = np.all(U[rows] == self.unit_design[cols], axis=1)
        if self.nugget is not None:
            ok &= self.nugget[cols] == 0
        return rows[ok], cols[ok]

    # -- prediction -------------------------------------------------------
    def predict(self, Z, return_cross: bool = False):
        """Posterior mean and variance at the rows of ``Z``.

        Variances include the trend-estimation term and are clamped at 0.
        """
        U = self.normalize(Z)
        r = self._cross(U)
        mean = self.beta0 + r @ self.alpha
        V = linalg.solve_triangular(self.chol, r.T, lower=True, check_finite=False)
        u = 1.0 - self._w @ V
        var = self.sigma2 * (1.0 - (V * V).sum(0) + u * u / self.one_c_one)
        neg = var < 0
        if neg.any():
            self.clamp_count += int(neg.sum())
            var = np.where(neg, 0.0, var)
        # at a noise-free design point the predictor is exact; skip the rounding
        rows, cols = self._exact_rows(U, r)
        if rows.size:
            mean[rows] = self.outputs[cols]
            var[rows] = 0.0
        if return_cross:
            return mean, var, (U, V, u)
        return mean, var

    def posterior_cov(self, Z):
        mean, _, (U, V, u) = self.predict(Z, return_cross=True)
        cov = self.corr(U) - V.T @ V + np.outer(u, u) / self.one_c_one
        return mean, self.sigma2 * cov

    def sample_paths(self, Z, B: int, rng: np.random.Generator) -> np.ndarray:
        """``B`` joint posterior draws over the rows of ``Z``, shape ``(B, len(Z))``.

        Raises
        ------
        SingularCovariance
            If the posterior covariance stays indefinite after jitter escalation.
        """
        if B < 1:
            raise ValueError("B must be at least 1")
        mean, cov = self.posterior_cov(Z)
        U = self.normalize(Z)
        fixed = np.zeros(len(mean), dtype=bool)
        fixed[self._exact_rows(U, self.corr(U, self.unit_design))[0]] = True
        paths = np.tile(mean, (B, 1))
        free = np.flatnonzero(~fixed)
        if free.size:
            sub = cov[np.ix_(free, free)]
            scale = max(float(np.mean(np.diag(sub))), np.finfo(float).eps * self.sigma2, 1e-300)
            L, _ = _chol(sub, jitters=(1e-10, 1e-8, 1e-6, 1e-4), scale=scale, err=SingularCovariance)
            paths[:, free] += rng.standard_normal((B, free.size)) @ L.T
        return paths

    # -- incremental update ----------------------------------------------
    def append(self, Z, Q) -> "KrigingModel":
        """New model with extra observations, keeping ``phi`` fixed.

        The Cholesky factor is extended by the new rows; trend and spatial
        variance are re-profiled in closed form.  Points that duplicate an
        existing design point are ignored.
        """
        if self.nugget is not None:
            raise NotImplementedError("append is only defined for noise-free models")
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        Q = np.atleast_1d(np.asarray(Q, dtype=float))
        design, outputs, L = self.design, self.outputs, self.chol
        U = self.unit_design
        for z, q in zip(Z, Q):
            u = self.normalize(z[None, :])
            if np.any(np.all(U == u, axis=1)):
                continue
            r = self.corr(u, U)[0]
            l21 = linalg.solve_triangular(L, r, lower=True, check_finite=False)
            l22 = 1.0 + self.jitter - l21 @ l21
            if l22 <= self.jitter * 1e-2:
                # numerically dependent on the existing design: fall back to a full refactorization
                design = np.vstack([design, z])
                outputs = np.append(outputs, q)
                return _assemble(design, outputs, self.corr, self.lower, self.scale)
            n = len(L)
            Ln = np.zeros((n + 1, n + 1))
            Ln[:n, :n] = L
            Ln[n, :n] = l21
            Ln[n, n] = np.sqrt(l22)
            L = Ln
            U = np.vstack([U, u])
            design = np.vstack([design, z])
            outputs = np.append(outputs, q)
        return _assemble(design, outputs, self.corr, self.lower, self.scale, chol=(L, self.jitter))


@dataclass
class SKModel(KrigingModel):
    """Stochastic kriging with a known diagonal noise matrix ``V``."""

    noise: np.ndarray = None

    @property
    def mu0(self) -> float:
        return self.beta0

    @property
    def tau2(self) -> float:
        return self.sigma2


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _bounds_from(design, lower, upper):
    lo = design.min(0) if lower is None else np.asarray(lower, dtype=float)
    hi = design.max(0) if upper is None else np.asarray(upper, dtype=float)
    scale = np.where(hi - lo > 0, hi - lo, 1.0)
    return lo, scale


def _merge_duplicates(design, outputs, merge):
    _, first = np.unique(design, axis=0, return_index=True)
    if len(first) == len(design):
        return design, outputs
    if not merge:
        raise DuplicatePoints(f"{len(design) - len(first)} duplicate design points")
    keep = np.sort(first)
    return design[keep], outputs[keep]


def _gls(L, Q):
    w = linalg.solve_triangular(L, np.ones(len(Q)), lower=True, check_finite=False)
    v = linalg.solve_triangular(L, Q, lower=True, check_finite=False)
    beta = float(w @ v / (w @ w))
    e = v - beta * w  # L^{-1}(Q - beta 1)
    return beta, e


def _assemble(design, outputs, corr, lower, scale, chol=None, sigma2=None,
              nugget=None, cls=KrigingModel, **extra):
    U = (design - lower) / scale
    if chol is None:
        C = corr(U)
        if nugget is not None:
            C = C + np.diag(nugget)
        L, jit = _chol(C)
    else:
        L, jit = chol
    beta, e = _gls(L, outputs)
    if sigma2 is None:
        sigma2 = max(float(e @ e) / len(outputs), 1e-300)
    model = cls(design=design, outputs=outputs, beta0=beta, sigma2=sigma2, corr=corr,
                lower=lower, scale=scale, chol=L, jitter=jit, nugget=nugget, **extra)
    model._cache["U"] = U
    return model


def _profile_nll(theta, U, Q, D2, want_grad=True):
    """``n log sigma2 + log|R|`` at ``phi = exp(theta)`` and its gradient in ``theta``."""
    phi = np.exp(theta)
    n = len(Q)
    R = np.exp(-(D2 @ phi))
    eye = np.eye(n)
    L = None
    for j in JITTERS:
        try:
            L = np.linalg.cholesky(R + j * eye)
            break
        except np.linalg.LinAlgError:
            continue
    if L is None:
        return 1e300, np.zeros_like(theta)
    Linv = np.tril(lapack.dtrtri(L, lower=1)[0])
    w = Linv.sum(axis=1)
    v = Linv @ Q
    beta = (w @ v) / (w @ w)
    e = v - beta * w
    s2 = max(float(e @ e) / n, 1e-300)
    nll = n * np.log(s2) + 2.0 * np.log(np.diag(L)).sum()
    if not want_grad:
        return nll, None
    Rinv = Linv.T @ Linv
    a = Linv.T @ e  # R^{-1}(Q - beta 1)
    # dR/dphi_k = -R * D2_k, so tr(R^{-1} dR) - a' dR a / s2 = -sum(D2_k * R * (Rinv - a a'/s2))
    M = R * (Rinv - np.outer(a, a) / s2)
    grad = -phi * np.einsum("ijk,ij->k", D2, M)
    return nll, grad


def _multistart(fun, dim, bounds, rng, extra_starts=(), n_starts=N_STARTS, jac=True):
    """Bounded L-BFGS-B from quasi-random starts plus supplied points; keeps the best."""
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    sob = qmc.Sobol(dim, scramble=True, seed=rng).random(n_starts) if n_starts > 0 else np.empty((0, dim))
    starts = list(lo + sob * (hi - lo)) + [np.asarray(s, dtype=float) for s in extra_starts]
    best_x, best_f = None, np.inf
    for x0 in starts:
        f0 = fun(x0)[0] if jac else fun(x0)
        if f0 < best_f:
            best_x, best_f = np.asarray(x0, dtype=float), f0
        try:
            res = optimize.minimize(fun, x0, jac=jac, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": 100, "ftol": 1e-7})
        except (ValueError, FloatingPointError):
            continue
        if np.isfinite(res.fun) and res.fun < best_f:
            best_x, best_f = np.clip(res.x, lo, hi), float(res.fun)
    return best_x, best_f


def coarse_grid(dim: int) -> np.ndarray:
    """Fallback grid in log(phi): isotropic points, one axis at a time varied for small dims."""
    pts = [np.full(dim, g) for g in GRID_LOG_PHI]
    if dim <= 3:
        mesh = np.meshgrid(*([GRID_LOG_PHI[::4]] * dim), indexing="ij")
        pts += list(np.stack([m.ravel() for m in mesh], axis=1))
    return np.array(pts)


def profile_loglik(model_or_phi, design=None, outputs=None, lower=None, upper=None) -> float:
    """Concentrated log-likelihood (up to constants), ``-(n log sigma2 + log|R|) / 2``."""
    if isinstance(model_or_phi, KrigingModel):
        m = model_or_phi
        U, Q, phi = m.unit_design, m.outputs, m.phi
    else:
        design = np.atleast_2d(np.asarray(design, dtype=float))
        lo, scale = _bounds_from(design, lower, upper)
        U, Q, phi = (design - lo) / scale, np.asarray(outputs, dtype=float), np.asarray(model_or_phi, dtype=float)
    D2 = (U[:, None, :] - U[None, :, :]) ** 2
    return -0.5 * _profile_nll(np.log(phi), U, Q, D2, want_grad=False)[0]


def fit_kriging(design, outputs, lower=None, upper=None, rng=None,
                phi0: Optional[np.ndarray] = None, n_starts: int = N_STARTS,
                merge_duplicates: bool = True, phi: Optional[np.ndarray] = None) -> KrigingModel:
    """Fit a constant-trend Gaussian-correlation kriging interpolator by MLE.

    Parameters
    ----------
    design : (n, d) array
        Design points in raw coordinates.
    outputs : (n,) array
        Deterministic responses.
    lower, upper : arrays, optional
        Box used to rescale inputs to ``[0, 1]``; defaults to the design's range.
    rng : Generator or int, optional
        Seeds the quasi-random multistart.  Defaults to a fixed seed.
    phi0 : array, optional
        Extra starting point (e.g. the previous fit when refitting).  With
        ``n_starts=0`` the search is a local refinement from ``phi0`` only.
    phi : array, optional
        Fixed correlation weights; skips the likelihood search.
    merge_duplicates : bool
        Keep the first of repeated design points instead of raising.

    Returns
    -------
    KrigingModel

    Raises
    ------
    DuplicatePoints, SingularCorrelation
    """
    design = np.atleast_2d(np.asarray(design, dtype=float))
    outputs = np.asarray(outputs, dtype=float).ravel()
    if len(design) != len(outputs):
        raise DimensionMismatch("design and outputs differ in length")
    design, outputs = _merge_duplicates(design, outputs, merge_duplicates)
    if len(outputs) < 2:
        raise ValueError("kriging needs at least two distinct design points")
    lo, scale = _bounds_from(design, lower, upper)
    U = (design - lo) / scale
    d = design.shape[1]
    if phi is not None:
        return _assemble(design, outputs, Correlation(np.broadcast_to(phi, (d,))), lo, scale)
    if np.ptp(outputs) == 0:
        # flat data carry no information about phi
        corr = Correlation(np.ones(d))
        return _assemble(design, outputs, corr, lo, scale,
                         sigma2=1e-12 * max(1.0, float(outputs[0]) ** 2))
    D2 = (U[:, None, :] - U[None, :, :]) ** 2
    fun = lambda th: _profile_nll(th, U, outputs, D2)
    extra = []
    if phi0 is not None:
        extra.append(np.clip(np.log(np.asarray(phi0, dtype=float)), *LOG_PHI_BOUNDS))
    # a warm start alone is a local refinement; otherwise the coarse grid backs up the search
    grid = coarse_grid(d) if (n_starts > 0 or not extra) else np.empty((0, d))
    gvals = np.array([_profile_nll(g, U, outputs, D2, want_grad=False)[0] for g in grid])
    if len(grid):
        extra.insert(0, grid[int(np.argmin(gvals))])
    rng = 0 if rng is None else rng
    theta, f = _multistart(fun, d, [LOG_PHI_BOUNDS] * d, rng, extra, n_starts)
    if len(grid) and f > gvals.min():
        theta = grid[int(np.argmin(gvals))]
    return _assemble(design, outputs, Correlation(np.exp(theta)), lo, scale)


def _sk_nll(params, U, G, V, kind, want_grad=True):
    """``log|K| + e' K^{-1} e`` with ``K = tau2 R + V`` and ``e`` the GLS residual."""
    tau2 = np.exp(params[0])
    phi = np.exp(params[1:])
    n = len(G)
    R = correlation_matrix(phi, U, kind=kind)
    K = tau2 * R + np.diag(V)
    try:
        L, _ = _chol(K, scale=tau2, err=SingularSystem)
    except SingularSystem:
        return 1e300, np.zeros_like(params)
    beta, e = _gls(L, G)
    nll = 2.0 * np.log(np.diag(L)).sum() + float(e @ e)
    if not want_grad:
        return nll, None
    Kinv = linalg.cho_solve((L, True), np.eye(n), check_finite=False)
    a = linalg.solve_triangular(L, e, lower=True, trans="T", check_finite=False)
    grad = np.empty_like(params)
    Kt = tau2 * R
    grad[0] = np.sum(Kinv * Kt) - a @ Kt @ a
    diff2 = (U[:, None, :] - U[None, :, :]) ** 2
    for k in range(len(phi)):
        Kk = -Kt * diff2[:, :, k] * phi[k]
        grad[k + 1] = np.sum(Kinv * Kk) - a @ Kk @ a
    return nll, grad


def fit_sk(design, outputs, noise, lower=None, upper=None, rng=None,
           kind: str = "gaussian", tau2: Optional[float] = None,
           phi: Optional[np.ndarray] = None, n_starts: int = N_STARTS) -> SKModel:
    """Fit stochastic kriging with known per-point noise variances.

    ``tau2`` and ``phi`` are estimated by maximum likelihood unless both are
    given, in which case they are held fixed and only the GLS trend is
    computed.  With ``noise`` identically zero and free hyperparameters the
    fit coincides with :func:`fit_kriging`.

    Raises
    ------
    SingularSystem
        If ``Sigma + V`` cannot be factorized.
    """
    design = np.atleast_2d(np.asarray(design, dtype=float))
    G = np.asarray(outputs, dtype=float).ravel()
    V = np.asarray(noise, dtype=float).ravel()
    if not (len(design) == len(G) == len(V)):
        raise DimensionMismatch("design, outputs and noise differ in length")
    if np.any(V < 0) or not np.all(np.isfinite(V)):
        raise ValueError("noise variances must be finite and nonnegative")
    if len(np.unique(design, axis=0)) != len(design):
        raise DuplicatePoints("stochastic kriging design points must be distinct")
    if len(G) < 2:
        raise ValueError("stochastic kriging needs at least two design points")
    lo, scale = _bounds_from(design, lower, upper)
    U = (design - lo) / scale
    d = design.shape[1]
    fixed = tau2 is not None and phi is not None

    if not fixed and kind == "gaussian" and np.all(V == 0):
        km = fit_kriging(design, G, lower=lo, upper=lo + scale, rng=rng, n_starts=n_starts,
                         merge_duplicates=False)
        return _assemble(km.design, km.outputs, km.corr, km.lower, km.scale, cls=SKModel,
                         noise=V, nugget=None, sigma2=km.sigma2)

    if fixed:
        t2, ph = float(tau2), np.broadcast_to(np.asarray(phi, dtype=float), (d,)).copy()
    elif np.ptp(G) == 0:
        t2, ph = 1e-12 * max(1.0, float(G[0]) ** 2), np.ones(d)
    else:
        var = float(np.var(G, ddof=1)) if len(G) > 1 else 1.0
        b_tau = (np.log(var * 1e-4), np.log(var * 1e2))
        bounds = [b_tau] + [LOG_PHI_BOUNDS] * d
        fun = lambda p: _sk_nll(p, U, G, V, kind)
        grid = [np.concatenate([[np.log(var)], g]) for g in coarse_grid(d)]
        gvals = [_sk_nll(p, U, G, V, kind, want_grad=False)[0] for p in grid]
        jac = True if kind == "gaussian" else None
        f_ = fun if jac else (lambda p: _sk_nll(p, U, G, V, kind, want_grad=False)[0])
        params, f = _multistart(f_, d + 1, bounds, 0 if rng is None else rng,
                                [grid[int(np.argmin(gvals))]], n_starts, jac=jac)
        if f > min(gvals):
            params = grid[int(np.argmin(gvals))]
        t2, ph = float(np.exp(params[0])), np.exp(params[1:])
    corr = Correlation(ph, kind)
    C = corr(U) + np.diag(V / t2)
    # strictly positive noise keeps C well conditioned, so try it unjittered first
    L, jit = _chol(C, jitters=((0.0,) + JITTERS) if np.all(V > 0) else JITTERS, err=SingularSystem)
    return _assemble(design, G, corr, lo, scale, chol=(L, jit), sigma2=t2,
                     nugget=V / t2, cls=SKModel, noise=V)


def kriging_predict(model: KrigingModel, Z) -> Tuple[np.ndarray, np.ndarray]:
    return model.predict(Z)


def sk_predict(model: SKModel, X) -> Tuple[np.ndarray, np.ndarray]:
    return model.predict(X)


def kriging_sample_paths(model: KrigingModel, Z, B: int, rng) -> np.ndarray:
    return model.sample_paths(Z, B, rng)
