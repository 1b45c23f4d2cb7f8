"""Asymptotic covariance of the linear coefficients.

The covariance of ``beta_hat`` is estimated by plugging in

* the efficiency factor ``upsilon = E psi^2(eps) / (E psi'(eps))^2``,
* the matrix ``A = E (Z - h*(X)) (Z - h*(X))'`` where ``h*(x)`` is the
  additive approximation of ``E(Z | X = x)``, fitted robustly one column of
  ``Z`` at a time with the same spline bases as the outcome fit.

Three estimators are exposed: ``sigma^2 upsilon A^-1`` with a plain or a
weighted ``A`` (weights ``w(eps_i)`` switch off observations with large
residuals) and a sandwich ``B^-1 D B^-T``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bsplines import CenteredSplineBasis, assemble_design
from .exceptions import AllRejectedError, NumericalError, SingularMatrixError
from .plam import LS, PlamFit, PlamSpec
from .rho import SQUARED_LOSS, RhoFamily
from .robust_solvers import MScaleSpec, ls_fit, m_step, s_estimator

logger = logging.getLogger(__name__)

PLUGIN_PLAIN = "plugin_plain"
PLUGIN_WEIGHTED = "plugin_weighted"
SANDWICH = "sandwich"
METHODS = (PLUGIN_PLAIN, PLUGIN_WEIGHTED, SANDWICH)

_COND_WARN = 1e10


@dataclass(frozen=True, eq=False)
class HStarFit:
    """Additive fits of each column of ``Z`` on the smooth covariates.

    Attributes
    ----------
    intercepts : ndarray, shape (q,)
        Fitted constants ``phi_m``.
    blocks : list of list of ndarray
        ``blocks[m][j]`` holds the reduced spline coefficients of ``h*_mj``.
    scales : ndarray, shape (q,)
        Residual scale of each column fit (S-scale, or residual SD for LS).
    bases : tuple of CenteredSplineBasis
        Shared per-covariate bases.
    residuals : ndarray, shape (n, q)
        Training values of ``Z - h*(X)``.
    """

    intercepts: np.ndarray
    blocks: list
    scales: np.ndarray
    bases: tuple[CenteredSplineBasis, ...]
    residuals: np.ndarray
    method: str = "mm"

    @property
    def q(self) -> int:
        return self.intercepts.size

    def component(self, m: int, j: int, x) -> np.ndarray:
        return self.bases[j].curve(self.blocks[m][j], x)

    def fitted(self, X) -> np.ndarray:
        """``h*(X)`` including the intercepts, shape ``(n, q)``."""
        X = np.asarray(X, dtype=float).reshape(-1, len(self.bases))
        V = np.hstack([b.eval_reduced(X[:, j]) for j, b in enumerate(self.bases)]) \
            if self.bases else np.empty((X.shape[0], 0))
        coef = np.array([np.concatenate([[a], *blk]) for a, blk in zip(self.intercepts, self.blocks)])
        return np.hstack([np.ones((X.shape[0], 1)), V]) @ coef.T


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    upsilon_hat: float
    A_hat: np.ndarray
    Sigma_hat: np.ndarray
    std_errors: np.ndarray
    method: str
    n: int
    B_hat: np.ndarray | None = None
    D_hat: np.ndarray | None = None
    condition: dict = field(default_factory=dict)


def standardized_residuals(fit: PlamFit) -> np.ndarray:
    if not fit.sigma_hat > 0:
        raise NumericalError("residual scale is zero; standardized residuals are undefined")
    return fit.residuals / fit.sigma_hat


def upsilon_hat(eps, rho1: RhoFamily) -> float:
    """``mean psi^2(eps) / (mean psi'(eps))^2``."""
    eps = np.asarray(eps, dtype=float)
    den = float(np.mean(rho1.psi_prime(eps)))
    if den == 0.0:
        raise AllRejectedError("every residual lies where psi' vanishes")
    return float(np.mean(rho1.psi(eps) ** 2)) / den**2


def fit_hstar(Z, X, bases, spec: PlamSpec = PlamSpec(), method: str = "mm") -> HStarFit:
    """Fit ``Z_m = phi_m + sum_j h*_mj(X_j) + sigma_m u_m`` for every column.

    ``method="mm"`` uses the S-scale followed by the bisquare M-step, with
    the scale's degrees-of-freedom correction equal to the number of spline
    columns.  ``method="ls"`` minimizes the plain sum of squares.  When a
    column is fitted exactly by the splines (zero S-scale) the S-estimate is
    kept and the M-step skipped.
    """
    if method not in ("mm", "ls"):
        raise ValueError(f"unknown h* method {method!r}")
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    Z = np.asarray(Z, dtype=float).reshape(n, -1)
    D = assemble_design(None, X, bases)
    A = D.matrix
    intercepts, blocks, scales = [], [], []
    for m in range(Z.shape[1]):
        zm = Z[:, m]
        if method == "ls":
            coef = ls_fit(A, zm)
            r = zm - A @ coef
            dof = max(n - A.shape[1], 1)
            scale = float(np.sqrt(r @ r / dof))
        else:
            s_est = s_estimator(A, zm, MScaleSpec(spec.rho0, spec.b, D.K), spec.solver)
            scale = s_est.scale
            if scale > 1e-10 * max(1.0, float(np.max(np.abs(zm)))):
                coef = m_step(A, zm, scale, spec.rho1, s_est.coefficients, spec.solver).coefficients
            else:
                warnings.warn(f"column {m} of Z has zero robust scale "
                              "(exact fit on at least half the rows); using the S-estimate", stacklevel=2)
                coef = s_est.coefficients
        a, _, blk = D.split(coef)
        intercepts.append(float(a))
        blocks.append(blk)
        scales.append(scale)
    intercepts = np.asarray(intercepts)
    hs = HStarFit(intercepts, blocks, np.asarray(scales), tuple(bases), np.empty((n, 0)), method)
    resid = Z - hs.fitted(X) if Z.shape[1] else np.empty((n, 0))
    return HStarFit(intercepts, blocks, np.asarray(scales), tuple(bases), resid, method)


def a_hat(Z, X, hstar: HStarFit, weights=None) -> np.ndarray:
    """(Weighted) mean of ``(Z_i - h*(X_i)) (Z_i - h*(X_i))'``."""
    R = np.asarray(Z, dtype=float).reshape(-1, hstar.q) - hstar.fitted(X)
    return _outer_mean(R, weights)


def _outer_mean(R, weights=None) -> np.ndarray:
    if weights is None:
        return R.T @ R / R.shape[0]
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise AllRejectedError("all weights are zero")
    return (R * w[:, None]).T @ R / total


def _inverse(M, name: str, cond_log: dict) -> np.ndarray:
    """Inverse through the SVD; refuses numerically singular matrices."""
    U, s, Vt = np.linalg.svd(M)
    if s.size == 0:
        return M.copy()
    if s[-1] <= s[0] * M.shape[0] * np.finfo(float).eps or s[0] == 0:
        raise SingularMatrixError(f"{name} is singular")
    cond = float(s[0] / s[-1])
    cond_log[name] = cond
    if cond > _COND_WARN:
        warnings.warn(f"{name} is ill-conditioned (condition number {cond:.3g})", stacklevel=3)
    return (Vt.T / s) @ U.T


def _loss_for(fit: PlamFit) -> RhoFamily:
    if fit.method == LS or fit.spec is None:
        return SQUARED_LOSS if fit.method == LS else PlamSpec().rho1
    return fit.spec.rho1


def sigma_hat_matrix(fit: PlamFit, hstar: HStarFit, method: str = PLUGIN_WEIGHTED) -> CovarianceEstimate:
    """Covariance estimate of ``sqrt(n) (beta_hat - beta)``.

    Standard errors of the coefficients are ``sqrt(diag(Sigma_hat) / n)``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown covariance method {method!r}")
    rho1 = _loss_for(fit)
    eps = standardized_residuals(fit)
    R = hstar.residuals
    n = R.shape[0]
    ups = upsilon_hat(eps, rho1)
    sigma2 = fit.sigma_hat**2
    cond: dict = {}
    B = D = None
    if method == SANDWICH:
        A = _outer_mean(R)
        B = -(R * rho1.psi_prime(eps)[:, None]).T @ R / (n * sigma2)
        D = (R * (rho1.psi(eps) ** 2)[:, None]).T @ R / (n * sigma2)
        Binv = _inverse(B, "B_hat", cond)
        S = Binv @ D @ Binv.T
    else:
        w = rho1.weight(eps) if method == PLUGIN_WEIGHTED else None
        A = _outer_mean(R, w)
        S = sigma2 * ups * _inverse(A, "A_hat", cond)
    S = 0.5 * (S + S.T)
    se = np.sqrt(np.clip(np.diag(S), 0.0, None) / n)
    return CovarianceEstimate(ups, A, S, se, method, n, B, D, cond)


def covariance(fit: PlamFit, Z, X, method: str = PLUGIN_WEIGHTED, hstar_method: str | None = None
               ) -> tuple[CovarianceEstimate, HStarFit]:
    """Fit ``h*`` with the outcome fit's bases and return the covariance estimate."""
    spec = fit.spec or PlamSpec()
    if hstar_method is None:
        hstar_method = "ls" if fit.method == LS else "mm"
    hs = fit_hstar(Z, X, fit.bases, spec, hstar_method)
    return sigma_hat_matrix(fit, hs, method), hs
