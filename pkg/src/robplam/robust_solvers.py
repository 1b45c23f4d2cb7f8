"""M-scale, fast-S initialization and the IRWLS M-step.

All solvers work on a plain design matrix (``DesignMatrix.matrix``) so they
can be reused for the outcome regression and for the covariate regressions
needed by the covariance estimator.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .exceptions import AllRejectedError, RankDeficientError, SubsampleError
from .rho import B_DEFAULT, C0_DEFAULT, RhoFamily, tukey

logger = logging.getLogger(__name__)

_MAD_CONSISTENCY = 0.6745


@dataclass(frozen=True)
class SolverConfig:
    """Tuning of the fast-S search and of the IRWLS iterations.

    ``seed`` is the only source of randomness; equal configs give equal fits.
    """

    n_sub: int = 500
    k_istep: int = 2
    best_keep: int = 5
    tol: float = 1e-7
    max_iter: int = 200
    seed: int = 0
    max_halvings: int = 30
    cond_max: float = 1e12
    retry_factor: int = 50
    # refinement drops candidates this far above a converged one; None disables it
    prune_margin: float | None = 0.01

    def __post_init__(self):
        if self.n_sub < 1 or self.best_keep < 1 or self.k_istep < 0:
            raise ValueError("n_sub and best_keep must be positive, k_istep non-negative")
        if self.max_iter < 1 or not self.tol > 0:
            raise ValueError("max_iter must be positive and tol > 0")

    def with_seed(self, seed: int) -> "SolverConfig":
        return SolverConfig(**{**self.__dict__, "seed": int(seed)})


@dataclass(frozen=True)
class MScaleSpec:
    rho0: RhoFamily = field(default_factory=lambda: tukey(C0_DEFAULT))
    b: float = B_DEFAULT
    dof_correction: int = 0

    def __post_init__(self):
        if not 0 < self.b < 1:
            raise ValueError("b must lie in (0, 1)")
        if not self.rho0.bounded:
            raise ValueError("the M-scale needs a bounded rho function")


@dataclass(frozen=True, eq=False)
class SEstimate:
    coefficients: np.ndarray
    scale: float
    trace: tuple
    n_candidates: int = 0
    n_singular: int = 0


@dataclass(frozen=True, eq=False)
class MStepResult:
    coefficients: np.ndarray
    objective: float
    iterations: int
    converged: bool
    objective_trace: tuple = ()


# ---------------------------------------------------------------------------
# M-scale

def m_scale(residuals, spec: MScaleSpec, tol: float = 1e-9, max_iter: int = 200) -> float:
    """Solve ``sum rho0(r_i / s) / (n - dof) = b`` for ``s``.

    Returns 0 when too many residuals are exactly zero for a positive root
    to exist.
    """
    r = np.abs(np.asarray(residuals, dtype=float).ravel())
    n = r.size
    if n == 0:
        raise ValueError("m_scale of an empty residual vector")
    denom = n - spec.dof_correction
    if denom <= 0:
        raise ValueError(f"degrees of freedom exhausted: n={n}, correction={spec.dof_correction}")
    target = spec.b * denom
    if np.count_nonzero(r) <= target:
        return 0.0
    rho0 = spec.rho0

    def excess(s):
        return rho0.rho(r / s).sum() - target

    s = np.median(r) / _MAD_CONSISTENCY
    if s <= 0:
        s = r.max()
    for _ in range(max_iter):
        s_new = s * np.sqrt(rho0.rho(r / s).sum() / target)
        if abs(s_new - s) <= tol * s:
            s = s_new
            break
        s = s_new
    if abs(excess(s)) <= 1e-10 * denom:
        return float(s)
    # Fixed point stalled; the left side is decreasing in s so bracket and bisect.
    lo, hi = s, s
    while excess(lo) < 0:
        lo /= 2.0
    while excess(hi) > 0:
        hi *= 2.0
    return float(optimize.brentq(excess, lo, hi, xtol=1e-15 * hi, rtol=4 * np.finfo(float).eps,
                                 maxiter=500))


def m_scale_rows(R, spec: MScaleSpec, tol: float = 1e-9, max_iter: int = 200) -> np.ndarray:
    """Row-wise M-scales of a residual matrix by vectorized fixed-point iteration.

    Cheaper than calling :func:`m_scale` per row; used to rank fast-S
    candidates, whose winner is then re-solved exactly.
    """
    R = np.abs(np.asarray(R, dtype=float))
    target = spec.b * (R.shape[1] - spec.dof_correction)
    s = np.median(R, axis=1) / _MAD_CONSISTENCY
    s = np.where(s > 0, s, R.max(axis=1))
    solvable = np.count_nonzero(R, axis=1) > target
    s[~solvable] = 0.0
    active = solvable.copy()
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        s_old = s[idx]
        s_new = _scale_step(R[idx], s_old, spec.rho0, target)
        s[idx] = s_new
        active[idx[np.abs(s_new - s_old) <= tol * s_old]] = False
    return s


def _scale_step(R, s, rho0, target):
    """One fixed-point update of the M-scale, row-wise over ``R``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = rho0.rho(R / s[:, None]).sum(axis=1) / target
    return np.where(s > 0, s * np.sqrt(ratio), 0.0)


# ---------------------------------------------------------------------------
# weighted least squares helpers

def wls(A, y, w):
    """Weighted least squares through a QR-backed lstsq on ``sqrt(w) A``."""
    sw = np.sqrt(w)
    return np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)[0]


def _wls_rows(A, y, W):
    """Row-batched weighted least squares; one weight vector per row of ``W``."""
    AtW = A.T[None, :, :] * W[:, None, :]
    M = AtW @ A
    v = AtW @ y
    out = np.empty_like(v)
    ok = (W > 0).sum(axis=1) >= A.shape[1]
    if ok.any():
        try:
            out[ok] = np.linalg.solve(M[ok], v[ok][..., None])[..., 0]
        except np.linalg.LinAlgError:
            ok[:] = False
    for i in np.flatnonzero(~ok | ~np.isfinite(out).all(axis=1)):
        out[i] = wls(A, y, W[i])
    return out


def ls_fit(A, y):
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


def as_matrix(design) -> np.ndarray:
    """Accept either a ``DesignMatrix`` or a plain 2-d array."""
    return np.asarray(getattr(design, "matrix", design), dtype=float)


def check_rank(A):
    p = A.shape[1]
    if A.shape[0] <= p:
        raise RankDeficientError(f"need more observations ({A.shape[0]}) than coefficients ({p})")
    rank = np.linalg.matrix_rank(A)
    if rank < p:
        raise RankDeficientError(f"design has rank {rank} < {p} columns")


# ---------------------------------------------------------------------------
# S-estimator

def canonical_order(A, y) -> np.ndarray:
    """Row order that does not depend on how the sample was listed.

    Subsample indices are drawn over this order, so permuting the rows of the
    data leaves every candidate fit, and hence the estimate, unchanged.
    """
    keys = (y,) + tuple(A[:, c] for c in reversed(range(A.shape[1])))
    return np.lexsort(keys)


def _draw_elemental(rng, A, y, order, config):
    n, p = A.shape
    coefs, drawn, singular = [], 0, 0
    max_attempts = config.retry_factor * config.n_sub
    have = 0
    while have < config.n_sub:
        need = config.n_sub - have
        idx = order[np.argsort(rng.random((need, n)), axis=1)[:, :p]]
        As = A[idx]
        with np.errstate(all="ignore"):
            cond = np.linalg.cond(As)
        ok = np.isfinite(cond) & (cond <= config.cond_max)
        drawn += need
        singular += int((~ok).sum())
        if ok.any():
            coefs.append(np.linalg.solve(As[ok], y[idx[ok]][..., None])[..., 0])
            have += int(ok.sum())
        if have < config.n_sub and drawn >= max_attempts:
            raise SubsampleError(
                f"only {have} of {config.n_sub} elemental subsamples were non-singular "
                f"after {drawn} draws")
    return np.vstack(coefs)[: config.n_sub], singular


def s_estimator(design, y, spec: MScaleSpec, config: SolverConfig = SolverConfig()) -> SEstimate:
    """Fast-S regression estimate minimizing the M-scale of the residuals.

    Elemental subsamples give starting fits; each is improved by
    ``config.k_istep`` concentration steps (IRWLS with weights ``w0(r/s)``
    and a one-step scale update), the ``best_keep`` lowest-scale candidates
    are iterated to convergence, and the one with the smallest M-scale wins.
    """
    A = as_matrix(design)
    y = np.asarray(y, dtype=float)
    check_rank(A)
    n, p = A.shape
    rho0 = spec.rho0
    target = spec.b * (n - spec.dof_correction)
    rng = np.random.default_rng(config.seed)

    betas, n_singular = _draw_elemental(rng, A, y, canonical_order(A, y), config)
    R = y[None, :] - betas @ A.T
    s = np.median(np.abs(R), axis=1) / _MAD_CONSISTENCY
    for _ in range(config.k_istep):
        betas, R, s = _concentrate(A, y, betas, R, s, rho0, target)

    scales = m_scale_rows(R, spec, tol=1e-6)
    keep = np.argsort(scales, kind="stable")[: config.best_keep]
    betas, R = betas[keep], R[keep]
    s = scales[keep]
    active = s > 0
    for _ in range(config.max_iter):
        if not active.any():
            break
        b_new, R_new, s_new = _concentrate(A, y, betas[active], R[active], s[active], rho0, target)
        delta = np.linalg.norm(b_new - betas[active], axis=1)
        done = delta <= config.tol * np.maximum(np.linalg.norm(b_new, axis=1), config.tol)
        betas[active], R[active], s[active] = b_new, R_new, s_new
        idx = np.flatnonzero(active)
        active[idx[done | (s_new == 0)]] = False
        settled = ~active
        if config.prune_margin is not None and settled.any():
            # One-step scale updates only decrease slowly from here; a candidate
            # already well above a converged one is not going to win.
            active &= s <= (1.0 + config.prune_margin) * s[settled].min()

    final = np.array([m_scale(r, spec) for r in R])
    best = int(np.argmin(final))
    trace = tuple(np.minimum.accumulate(np.concatenate([np.sort(scales)[::-1], final[[best]]])))
    return SEstimate(betas[best].copy(), float(final[best]), trace, len(scales), n_singular)


def _concentrate(A, y, betas, R, s, rho0, target):
    """One concentration step for every row: rescale, reweight, refit."""
    s = _scale_step(R, s, rho0, target)
    with np.errstate(divide="ignore", invalid="ignore"):
        W = rho0.weight(R / s[:, None])
    zero = s <= 0
    W[zero] = 1.0
    new = _wls_rows(A, y, W)
    new[zero] = betas[zero]
    return new, y[None, :] - new @ A.T, s


# ---------------------------------------------------------------------------
# M-step

def m_objective(A, y, coef, sigma, rho1):
    return float(rho1.rho((y - A @ coef) / sigma).sum())


def m_step(design, y, sigma: float, rho1: RhoFamily, init, config: SolverConfig = SolverConfig()) -> MStepResult:
    """Minimize ``sum rho1(r_i / sigma)`` by IRWLS started at ``init``.

    A full reweighted step is taken when it does not increase the objective;
    otherwise it is halved up to ``config.max_halvings`` times.
    """
    if not sigma > 0:
        raise ValueError("the M-step needs a positive residual scale")
    if not rho1.bounded:
        raise ValueError("the M-step needs a bounded rho function")
    A = as_matrix(design)
    y = np.asarray(y, dtype=float)
    coef = np.asarray(init, dtype=float).copy()
    if coef.shape != (A.shape[1],):
        raise ValueError(f"init has length {coef.size}, expected {A.shape[1]}")

    obj = m_objective(A, y, coef, sigma, rho1)
    trace = [obj]
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        w = rho1.weight((y - A @ coef) / sigma)
        if not (w > 0).any():
            raise AllRejectedError("all observations rejected by the M-step weights")
        step = wls(A, y, w) - coef
        new_obj = m_objective(A, y, coef + step, sigma, rho1)
        halvings = 0
        while new_obj > obj and halvings < config.max_halvings:
            step *= 0.5
            halvings += 1
            new_obj = m_objective(A, y, coef + step, sigma, rho1)
        if new_obj > obj:
            converged = True
            break
        coef = coef + step
        obj = new_obj
        trace.append(obj)
        if np.linalg.norm(step) <= config.tol * max(np.linalg.norm(coef), config.tol):
            converged = True
            break
    return MStepResult(coef, obj, it, converged, tuple(trace))
