"""Fitting partially linear additive models.

The model is ``y = mu + beta'z + sum_j eta_j(x_j) + sigma * eps``.  Each
``eta_j`` is approximated in a centered B-spline space, which turns the
problem into a linear regression on ``[1 | Z | V]``.  That regression is
solved either by least squares or by an MM-estimator (S-scale followed by a
bisquare M-step), and the basis dimension is chosen by a (robust) BIC.
"""
from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bsplines import (INTEGRAL, UNIFORM, CenteredSplineBasis, DesignMatrix,
                       assemble_design, build_basis)
from .exceptions import AllRejectedError, DatasetError
from .rho import B_DEFAULT, C0_DEFAULT, C1_DEFAULT, SQUARED_LOSS, RhoFamily, tukey
from .robust_solvers import (MScaleSpec, SolverConfig, ls_fit, m_step,
                             s_estimator)

logger = logging.getLogger(__name__)

MM = "mm"
LS = "ls"

_COMBINATORIAL_WARN = 200


def default_k_grid(n: int) -> list[int]:
    """Basis dimensions from ``max(n^(1/5)/2, 4)`` to ``8 + 2 n^(1/5)``."""
    r = n ** 0.2
    return list(range(max(math.ceil(r / 2), 4), math.floor(8 + 2 * r) + 1))


@dataclass(frozen=True)
class PlamSpec:
    """Everything that determines a fit besides the data."""

    method: str = MM
    order: int = 4
    k_grid: tuple | None = None
    equal_k: bool = True
    knots: str = UNIFORM
    centering: str = INTEGRAL
    rho0: RhoFamily = field(default_factory=lambda: tukey(C0_DEFAULT))
    b: float = B_DEFAULT
    rho1: RhoFamily = field(default_factory=lambda: tukey(C1_DEFAULT))
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.method not in (MM, LS):
            raise ValueError(f"method must be 'mm' or 'ls', got {self.method!r}")
        if self.k_grid is not None:
            if len(self.k_grid) == 0:
                raise ValueError("k_grid is empty")
            flat = [k for entry in self.k_grid for k in np.atleast_1d(entry)]
            if min(flat) < self.order:
                raise ValueError("every candidate k must be at least the spline order")

    def candidates(self, n: int, p: int) -> list[tuple[int, ...]]:
        """Candidate dimension vectors, ascending."""
        if p == 0:
            return [()]
        grid = list(self.k_grid) if self.k_grid is not None else default_k_grid(n)
        if self.equal_k:
            return [(int(k),) * p for k in sorted(grid)]
        if all(np.ndim(g) == 0 for g in grid):
            grids = [sorted(int(k) for k in grid)] * p
        else:
            grids = [sorted(int(k) for k in g) for g in grid]
            if len(grids) != p:
                raise ValueError(f"need one k grid per smooth covariate ({p}), got {len(grids)}")
        combos = list(itertools.product(*grids))
        if len(combos) > _COMBINATORIAL_WARN:
            warnings.warn(f"{len(combos)} basis-dimension combinations to fit", stacklevel=3)
        return sorted(combos, key=lambda c: (sum(c), c))


@dataclass(frozen=True, eq=False)
class PlamFit:
    method: str
    coefficients: np.ndarray
    q: int
    bases: tuple[CenteredSplineBasis, ...]
    sigma_hat: float
    residuals: np.ndarray
    selected_k: tuple[int, ...]
    criterion_trace: tuple
    initial_coefficients: np.ndarray | None = None
    spec: PlamSpec | None = None

    @property
    def mu_hat(self) -> float:
        return float(self.coefficients[0])

    @property
    def beta_hat(self) -> np.ndarray:
        return self.coefficients[1:1 + self.q]

    @property
    def c_hat(self) -> list[np.ndarray]:
        out, start = [], 1 + self.q
        for b in self.bases:
            out.append(self.coefficients[start:start + b.k - 1])
            start += b.k - 1
        return out

    @property
    def n(self) -> int:
        return self.residuals.size

    @property
    def p(self) -> int:
        return len(self.bases)

    def eta(self, j: int, x) -> np.ndarray:
        """Fitted additive component ``j`` at ``x`` (clamped to its interval)."""
        return self.bases[j].curve(self.c_hat[j], x)

    def predict(self, Z, X) -> np.ndarray:
        return predict(self, Z, X)


def rbic(residuals, sigma_hat: float, rho1: RhoFamily, k_vec, n: int | None = None) -> float:
    """Robust BIC ``log(sigma^2 sum rho1(r/sigma)) + log(n)/(2n) sum k``.

    With the squared loss no scale is used and the first term is
    ``log(sum r^2)``.
    """
    r = np.asarray(residuals, dtype=float)
    n = r.size if n is None else n
    penalty = math.log(n) / (2 * n) * float(sum(k_vec))
    if rho1.bounded:
        if not sigma_hat > 0:
            raise ValueError("robust BIC needs a positive scale")
        loss = sigma_hat**2 * float(rho1.rho(r / sigma_hat).sum())
    else:
        loss = float(np.sum(r * r))
    if loss <= 0:
        raise AllRejectedError("zero loss makes the BIC minus infinity")
    return math.log(loss) + penalty


def _exact(residual_scale: float, y) -> bool:
    return residual_scale <= 1e-10 * max(1.0, float(np.max(np.abs(y))))


def _fit_one(D: DesignMatrix, y, spec: PlamSpec):
    """Fit a single candidate; returns (coef, init, sigma, residuals, criterion)."""
    A = D.matrix
    n = A.shape[0]
    if spec.method == LS:
        coef = ls_fit(A, y)
        r = y - A @ coef
        rss = float(r @ r)
        dof = n - A.shape[1]
        sigma = math.sqrt(rss / dof) if dof > 0 else 0.0
        if _exact(math.sqrt(rss / n), y):
            return coef, None, sigma, r, -math.inf
        return coef, None, sigma, r, rbic(r, sigma, SQUARED_LOSS, D.ks, n)

    mspec = MScaleSpec(spec.rho0, spec.b, D.q + D.K)
    s_est = s_estimator(A, y, mspec, spec.solver)
    sigma = s_est.scale
    if _exact(sigma, y):
        r = y - A @ s_est.coefficients
        return s_est.coefficients, s_est.coefficients, sigma, r, -math.inf
    m = m_step(A, y, sigma, spec.rho1, s_est.coefficients, spec.solver)
    r = y - A @ m.coefficients
    return m.coefficients, s_est.coefficients, sigma, r, rbic(r, sigma, spec.rho1, D.ks, n)


def _check_inputs(Z, X, y):
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    Z = np.empty((n, 0)) if Z is None else np.asarray(Z, dtype=float).reshape(n, -1)
    X = np.empty((n, 0)) if X is None else np.asarray(X, dtype=float).reshape(n, -1)
    for name, a in (("y", y), ("Z", Z), ("X", X)):
        if not np.all(np.isfinite(a)):
            raise DatasetError(f"{name} contains missing or non-finite values")
    return Z, X, y


def fit(Z, X, y, spec: PlamSpec = PlamSpec()) -> PlamFit:
    """Fit the model for every candidate basis dimension and keep the best.

    The criterion is evaluated on every candidate; ties go to the smaller
    dimension.  For MM fits the scale entering the criterion is the
    S-scale of that candidate.
    """
    Z, X, y = _check_inputs(Z, X, y)
    n, q, p = y.size, Z.shape[1], X.shape[1]
    best = None
    trace = []
    for k_vec in spec.candidates(n, p):
        bases = tuple(build_basis(X[:, j], spec.order, k, spec.knots, spec.centering)
                      for j, k in enumerate(k_vec))
        D = assemble_design(Z, X, bases) if p or q else _intercept_only(n)
        coef, init, sigma, r, crit = _fit_one(D, y, spec)
        trace.append((k_vec, crit))
        logger.debug("k=%s criterion=%.6f", k_vec, crit)
        if best is None or crit < best[-1]:
            best = (k_vec, bases, coef, init, sigma, r, crit)
    k_vec, bases, coef, init, sigma, r, _ = best
    return PlamFit(spec.method, coef, q, bases, sigma, r, k_vec, tuple(trace), init, spec)


def _intercept_only(n):
    return DesignMatrix(np.ones((n, 1)), 0, ())


def predict(fit: PlamFit, Z, X) -> np.ndarray:
    """Evaluate ``mu + beta'z + sum_j eta_j(x_j)`` row-wise; x is clamped."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float)) if fit.q else None
    X = np.atleast_2d(np.asarray(X, dtype=float)) if fit.p else None
    if Z is not None and Z.shape[1] != fit.q:
        raise ValueError(f"Z has {Z.shape[1]} columns, the fit expects {fit.q}")
    if X is not None and X.shape[1] != fit.p:
        raise ValueError(f"X has {X.shape[1]} columns, the fit expects {fit.p}")
    out = fit.mu_hat
    if Z is not None:
        out = out + Z @ fit.beta_hat
    if X is not None:
        out = out + sum(fit.eta(j, X[:, j]) for j in range(fit.p))
    if np.ndim(out) == 0:
        raise ValueError("cannot infer the number of rows without covariates")
    return np.asarray(out, dtype=float)


def tukey_hinges(x) -> tuple[float, float]:
    """Lower and upper hinges as used by the classical boxplot."""
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    n4 = math.floor((n + 3) / 2) / 2
    lo = 0.5 * (x[math.floor(n4) - 1] + x[math.ceil(n4) - 1])
    hi = 0.5 * (x[math.floor(n + 1 - n4) - 1] + x[math.ceil(n + 1 - n4) - 1])
    return lo, hi


def flag_outliers(fit_or_residuals, coef: float = 1.5) -> np.ndarray:
    """Zero-based indices of residuals outside the boxplot whiskers."""
    r = np.asarray(getattr(fit_or_residuals, "residuals", fit_or_residuals), dtype=float)
    lo, hi = tukey_hinges(r)
    spread = coef * (hi - lo)
    return np.flatnonzero((r < lo - spread) | (r > hi + spread))
