import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from robplam.exceptions import RankDeficientError, SubsampleError
from robplam.rho import tukey
from robplam.robust_solvers import (MScaleSpec, SolverConfig, canonical_order, ls_fit, m_objective,
                                    m_scale, m_scale_rows, m_step, s_estimator)

SPEC = MScaleSpec()
RHO1 = tukey(4.685)


def bisection_scale(r, spec, iters=200):
    """Oracle: plain bisection on the monotone left-hand side of the scale equation."""
    r = np.abs(r)
    target = spec.b * (r.size - spec.dof_correction)
    c = spec.rho0.c

    def f(s):
        u = np.minimum((r / (c * s)) ** 2, 1.0)
        return (1 - (1 - u) ** 3).sum() - target

    lo, hi = 1e-300, 1.0
    while f(hi) > 0:
        hi *= 2
    lo = hi
    while f(lo) < 0:
        lo /= 2
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def heavy_sample(rng, n):
    r = rng.standard_normal(n)
    bad = rng.random(n) < 0.2
    r[bad] = rng.normal(10, 5, bad.sum())
    return r * rng.uniform(0.01, 100)


def test_m_scale_matches_bisection_oracle():
    rng = np.random.default_rng(2024)
    for i in range(50):
        n = int(rng.integers(5, 300))
        spec = MScaleSpec(dof_correction=int(rng.integers(0, n // 3)))
        r = heavy_sample(rng, n)
        s = m_scale(r, spec)
        oracle = bisection_scale(r, spec)
        assert abs(s - oracle) <= 1e-8 * max(1.0, oracle), i


def test_m_scale_solves_equation():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(10, 200))
        r = heavy_sample(rng, n)
        s = m_scale(r, SPEC)
        assert abs(SPEC.rho0.rho(r / s).mean() - SPEC.b) <= 1e-8


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.booleans())
def test_m_scale_equivariance(seed, lam, flip):
    r = heavy_sample(np.random.default_rng(seed), 40)
    factor = -lam if flip else lam
    assert m_scale(factor * r, SPEC) == pytest.approx(lam * m_scale(r, SPEC), rel=1e-8)


def test_m_scale_degenerate_cases():
    assert m_scale(np.zeros(10), SPEC) == 0.0
    # more than half the residuals zero: no positive root
    assert m_scale(np.r_[np.zeros(6), np.ones(4)], SPEC) == 0.0
    with pytest.raises(ValueError):
        m_scale(np.array([]), SPEC)
    with pytest.raises(ValueError):
        m_scale(np.ones(3), MScaleSpec(dof_correction=3))
    with pytest.raises(ValueError):
        MScaleSpec(b=1.2)


def test_m_scale_normal_consistency():
    r = np.random.default_rng(0).standard_normal(200_000)
    assert m_scale(r, SPEC) == pytest.approx(1.0, abs=0.01)


def test_m_scale_rows_agrees():
    rng = np.random.default_rng(5)
    R = np.vstack([heavy_sample(rng, 60) for _ in range(20)])
    R[3, :40] = 0.0
    rows = m_scale_rows(R, SPEC, tol=1e-12)
    exact = np.array([m_scale(r, SPEC) for r in R])
    np.testing.assert_allclose(rows, exact, rtol=1e-8)
    assert rows[3] == 0.0


def regression_problem(rng, n=60, p=3, outliers=0.0):
    A = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    beta = rng.normal(0, 2, p)
    y = A @ beta + rng.standard_normal(n)
    m = int(outliers * n)
    y[:m] += rng.normal(30, 3, m)
    return A, y, beta


def test_m_step_objective_monotone():
    rng = np.random.default_rng(11)
    for _ in range(100):
        A, y, beta = regression_problem(rng, n=int(rng.integers(20, 80)), p=int(rng.integers(2, 5)),
                                        outliers=rng.uniform(0, 0.3))
        init = beta + rng.normal(0, 1, A.shape[1])
        res = m_step(A, y, float(rng.uniform(0.5, 3)), RHO1, init)
        assert np.all(np.diff(res.objective_trace) <= 1e-12)
        assert res.objective == pytest.approx(res.objective_trace[-1])


def test_m_step_matches_derivative_free_minimizer():
    rng = np.random.default_rng(99)
    for _ in range(10):
        A, y, _ = regression_problem(rng, n=50, p=3, outliers=0.15)
        sigma = 1.2
        init = ls_fit(A[20:], y[20:])
        res = m_step(A, y, sigma, RHO1, init, SolverConfig(tol=1e-12, max_iter=1000))
        nm = optimize.minimize(lambda b: m_objective(A, y, b, sigma, RHO1), init, method="Nelder-Mead",
                               options=dict(xatol=1e-10, fatol=1e-12, maxiter=20000, maxfev=40000))
        assert abs(res.objective - nm.fun) <= 1e-3


def test_m_step_errors():
    A, y, _ = regression_problem(np.random.default_rng(0))
    with pytest.raises(ValueError):
        m_step(A, y, 0.0, RHO1, np.zeros(3))
    with pytest.raises(ValueError):
        m_step(A, y, 1.0, RHO1, np.zeros(2))
    from robplam.rho import SQUARED_LOSS
    with pytest.raises(ValueError):
        m_step(A, y, 1.0, SQUARED_LOSS, np.zeros(3))
    from robplam.exceptions import AllRejectedError
    with pytest.raises(AllRejectedError):
        m_step(A, y + 1e6, 1e-3, RHO1, np.zeros(3))


def test_s_estimator_resists_outliers():
    rng = np.random.default_rng(3)
    A, y, beta = regression_problem(rng, n=100, p=3, outliers=0.3)
    est = s_estimator(A, y, MScaleSpec(dof_correction=2), SolverConfig(seed=1))
    assert np.abs(est.coefficients - beta).max() < 0.6
    assert np.abs(ls_fit(A, y) - beta).max() > 2
    assert 0.6 < est.scale < 2.5
    assert all(a >= b for a, b in zip(est.trace, est.trace[1:]))
    assert est.trace[-1] == est.scale


def test_s_estimator_seed_determinism_and_permutation_invariance():
    rng = np.random.default_rng(8)
    A, y, _ = regression_problem(rng, n=80, p=4, outliers=0.1)
    cfg = SolverConfig(seed=42)
    a = s_estimator(A, y, SPEC, cfg)
    b = s_estimator(A, y, SPEC, cfg)
    np.testing.assert_array_equal(a.coefficients, b.coefficients)
    perm = rng.permutation(len(y))
    c = s_estimator(A[perm], y[perm], SPEC, cfg)
    np.testing.assert_allclose(c.coefficients, a.coefficients, atol=1e-8)
    assert c.scale == pytest.approx(a.scale, rel=1e-8)


def test_canonical_order_is_listing_free():
    rng = np.random.default_rng(0)
    A, y, _ = regression_problem(rng, n=30)
    perm = rng.permutation(30)
    np.testing.assert_array_equal(A[perm][canonical_order(A[perm], y[perm])], A[canonical_order(A, y)])


def test_pruning_does_not_change_the_winner():
    rng = np.random.default_rng(21)
    for _ in range(8):
        A, y, _ = regression_problem(rng, n=100, p=int(rng.integers(3, 8)), outliers=rng.uniform(0, 0.3))
        a = s_estimator(A, y, SPEC, SolverConfig(seed=5))
        b = s_estimator(A, y, SPEC, SolverConfig(seed=5, prune_margin=None))
        assert a.scale <= b.scale * (1 + 1e-6)


def test_exact_fit_gives_zero_scale():
    rng = np.random.default_rng(1)
    A, _, beta = regression_problem(rng, n=40)
    y = A @ beta
    y[:5] += 50
    est = s_estimator(A, y, SPEC)
    assert est.scale == 0.0
    np.testing.assert_allclose(est.coefficients, beta, atol=1e-8)


def test_rank_deficient_design():
    A = np.column_stack([np.ones(20), np.arange(20.0), 2 * np.arange(20.0)])
    with pytest.raises(RankDeficientError):
        s_estimator(A, np.arange(20.0), SPEC)
    with pytest.raises(RankDeficientError):
        s_estimator(np.ones((2, 2)), np.ones(2), SPEC)


def test_subsample_exhaustion():
    n = 60
    A = np.zeros((n, 3))
    A[:, 0] = 1.0
    A[0, 1] = 1.0
    A[1, 2] = 1.0
    y = np.random.default_rng(0).standard_normal(n)
    with pytest.raises(SubsampleError):
        s_estimator(A, y, SPEC, SolverConfig(n_sub=20, retry_factor=1))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(n_sub=0)
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)
    assert SolverConfig().with_seed(9).seed == 9
