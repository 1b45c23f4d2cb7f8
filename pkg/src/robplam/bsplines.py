"""Centered B-spline bases and the partially linear additive design.

Each smooth covariate gets an order-``ell`` B-spline basis with ``k``
elements on ``[min(x), max(x)]``.  Elements are centered so that every
spline in their span has zero mean, then the last element is dropped: the
centered elements sum to zero, so keeping all ``k`` of them would make the
design collinear with the intercept.

Two centering conventions are offered:

``"integral"``
    subtract the mean of each element over the interval, computed in closed
    form as ``(t[s+ell] - t[s]) / (ell * (hi - lo))``.  Fitted components
    then integrate to zero over the interval.
``"empirical"``
    subtract the column means over the training sample, so fitted
    components average to zero over the observed covariate values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline

UNIFORM = "uniform"
QUANTILE = "quantile"
INTEGRAL = "integral"
EMPIRICAL = "empirical"


@dataclass(frozen=True)
class KnotScheme:
    mode: str
    interior_count: int
    boundary: tuple[float, float]

    def __post_init__(self):
        if self.mode not in (UNIFORM, QUANTILE):
            raise ValueError(f"unknown knot mode {self.mode!r}")
        if self.interior_count < 0:
            raise ValueError("interior_count must be non-negative")
        lo, hi = self.boundary
        if not lo < hi:
            raise ValueError("degenerate covariate interval (min == max)")

    def interior_knots(self, x_values=None) -> np.ndarray:
        lo, hi = self.boundary
        m = self.interior_count
        if m == 0:
            return np.empty(0)
        if self.mode == UNIFORM:
            return np.linspace(lo, hi, m + 2)[1:-1]
        if x_values is None:
            raise ValueError("quantile knots need the observed covariate values")
        probs = np.arange(1, m + 1) / (m + 1)
        knots = np.quantile(np.asarray(x_values, dtype=float), probs)
        if knots[0] <= lo or knots[-1] >= hi:
            raise ValueError("quantile knots collapse onto the boundary; too many ties")
        return knots


@dataclass(frozen=True, eq=False)
class CenteredSplineBasis:
    """A centered B-spline basis for one covariate.

    Attributes
    ----------
    order : int
        Spline order (degree + 1); 4 gives cubic splines.
    knots : ndarray
        Full knot vector with ``order``-fold boundary knots.
    centers : ndarray
        Value subtracted from each of the ``k`` raw elements.
    """

    order: int
    knots: np.ndarray
    centers: np.ndarray
    centering: str = INTEGRAL

    @property
    def k(self) -> int:
        return len(self.knots) - self.order

    @property
    def lo(self) -> float:
        return float(self.knots[0])

    @property
    def hi(self) -> float:
        return float(self.knots[-1])

    @property
    def interior_knots(self) -> np.ndarray:
        return self.knots[self.order:-self.order]

    def raw(self, x) -> np.ndarray:
        """Uncentered basis values, shape ``(len(x), k)``; x is clamped."""
        x = np.clip(np.atleast_1d(np.asarray(x, dtype=float)), self.lo, self.hi)
        return BSpline.design_matrix(x, self.knots, self.order - 1).toarray()

    def full(self, x) -> np.ndarray:
        """All ``k`` centered elements."""
        return self.raw(x) - self.centers

    def eval_reduced(self, x) -> np.ndarray:
        """First ``k - 1`` centered elements; the columns used in the design."""
        return self.full(x)[:, :-1]

    def curve(self, coef, x) -> np.ndarray:
        """Evaluate ``sum_s coef[s] * B_s(x)`` for reduced coefficients."""
        return self.eval_reduced(x) @ np.asarray(coef, dtype=float)

    def integral_means(self) -> np.ndarray:
        t, ell = self.knots, self.order
        return (t[ell:] - t[:-ell]) / (ell * (self.hi - self.lo))

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "knots": self.knots.tolist(),
            "centers": self.centers.tolist(),
            "centering": self.centering,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CenteredSplineBasis":
        return cls(int(d["order"]), np.asarray(d["knots"], dtype=float),
                   np.asarray(d["centers"], dtype=float), d.get("centering", INTEGRAL))


def build_basis(x_values, order: int = 4, k: int = 4, mode: str = UNIFORM,
                centering: str = INTEGRAL) -> CenteredSplineBasis:
    """Build a centered basis of dimension ``k`` from observed covariate values.

    Uniform mode places ``k - order`` equispaced interior knots on
    ``[min(x), max(x)]``; quantile mode puts them at the ``l / (k - order + 1)``
    empirical quantiles of ``x_values``.
    """
    x = np.asarray(x_values, dtype=float).ravel()
    if order < 2:
        raise ValueError("spline order must be at least 2")
    if k < order:
        raise ValueError(f"basis dimension k={k} is smaller than the order {order}")
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise ValueError("covariate values must be finite and non-empty")
    scheme = KnotScheme(mode, k - order, (float(x.min()), float(x.max())))
    lo, hi = scheme.boundary
    t = np.concatenate([np.full(order, lo), scheme.interior_knots(x), np.full(order, hi)])
    basis = CenteredSplineBasis(order, t, np.zeros(k), centering)
    if centering == INTEGRAL:
        centers = basis.integral_means()
    elif centering == EMPIRICAL:
        centers = basis.raw(x).mean(axis=0)
    else:
        raise ValueError(f"unknown centering {centering!r}")
    return CenteredSplineBasis(order, t, centers, centering)


def eval_reduced(basis: CenteredSplineBasis, x) -> np.ndarray:
    return basis.eval_reduced(x)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Regression design laid out as ``[1 | Z | V^(1) | ... | V^(p)]``."""

    matrix: np.ndarray
    q: int
    ks: tuple[int, ...]
    bases: tuple[CenteredSplineBasis, ...] = field(default=())

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def K(self) -> int:
        return sum(k - 1 for k in self.ks)

    @property
    def ncols(self) -> int:
        return self.matrix.shape[1]

    def block_slices(self) -> list[slice]:
        """Column slices of the spline blocks, one per smooth covariate."""
        out, start = [], 1 + self.q
        for k in self.ks:
            out.append(slice(start, start + k - 1))
            start += k - 1
        return out

    def split(self, coef):
        """Split a coefficient vector into (intercept, linear part, spline blocks)."""
        coef = np.asarray(coef, dtype=float)
        return coef[0], coef[1:1 + self.q], [coef[s] for s in self.block_slices()]


def assemble_design(Z, X, bases: Sequence[CenteredSplineBasis]) -> DesignMatrix:
    Z = _as_2d(Z)
    X = _as_2d(X)
    if len(bases) != X.shape[1]:
        raise ValueError(f"got {len(bases)} bases for {X.shape[1]} smooth covariates")
    rows = {a.shape[0] for a in (Z, X) if a.shape[1]}
    if len(rows) > 1:
        raise ValueError("row counts of Z and X differ")
    if not rows:
        raise ValueError("cannot infer the sample size without covariates")
    n = rows.pop()
    blocks = [np.ones((n, 1))]
    if Z.shape[1]:
        blocks.append(Z)
    blocks += [b.eval_reduced(X[:, j]) for j, b in enumerate(bases)]
    return DesignMatrix(np.hstack(blocks), Z.shape[1], tuple(b.k for b in bases), tuple(bases))


def _as_2d(a) -> np.ndarray:
    if a is None:
        return np.empty((0, 0))
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return a
