"""Simulation models, contaminations and Monte Carlo summaries.

Every sample follows ``y = mu + beta'z + eta_1(x_1) + eta_2(x_2) + sigma eps``
with ``beta = (3, 3)``, ``mu = 0``, ``sigma = 0.2`` and both additive
components integrating to zero on ``[0, 1]``.  The six covariate models
differ in how ``(Z, X)`` are drawn; four contamination schemes perturb the
errors (C1, C2) or plant high-leverage points (C3).
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources

import numpy as np

from . import plam
from .exceptions import RobplamError
from .robust_solvers import SolverConfig

logger = logging.getLogger(__name__)

MU = 0.0
BETA = np.array([3.0, 3.0])
SIGMA = 0.2
MODELS = (1, 2, 3, 4, 5, 6)
CONTAMINATIONS = ("C0", "C1", "C2", "C3")
METHODS = (plam.LS, plam.MM)
TARGET_CORRELATION = 0.7
CURVE_GRID = np.linspace(0.05, 0.95, 100)


def eta1(x):
    return 2.0 * np.sin(np.pi * np.asarray(x, dtype=float)) - 4.0 / np.pi


def eta2(x):
    return np.exp(np.asarray(x, dtype=float)) - (math.e - 1.0)


TRUE_ETAS = (eta1, eta2)


def copula_latent_correlation(target: float) -> float:
    """Gaussian-copula correlation giving uniforms with Pearson correlation ``target``.

    For a bivariate normal with correlation ``r`` the probability-integral
    transforms have correlation ``(6/pi) arcsin(r/2)``; this inverts it.
    """
    if not -1.0 <= target <= 1.0:
        raise ValueError("correlation must lie in [-1, 1]")
    return 2.0 * math.sin(math.pi * target / 6.0)


@dataclass(frozen=True, eq=False)
class Sample:
    y: np.ndarray
    Z: np.ndarray
    X: np.ndarray
    signal: np.ndarray
    errors: np.ndarray
    contaminated: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @property
    def n(self) -> int:
        return self.y.size


def _uniform_pair(rng, n, rho_u):
    from scipy.stats import norm

    r = copula_latent_correlation(rho_u)
    g = rng.standard_normal((n, 2))
    g[:, 1] = r * g[:, 0] + math.sqrt(1.0 - r * r) * g[:, 1]
    return norm.cdf(g)


def _covariates(model: int, n: int, rng):
    if model == 1:
        U = rng.random((n, 4))
        return U[:, :2], U[:, 2:]
    if model == 2:
        pair = _uniform_pair(rng, n, TARGET_CORRELATION)
        rest = rng.random((n, 2))
        Z = np.column_stack([pair[:, 0], rest[:, 0]])
        X = np.column_stack([pair[:, 1], rest[:, 1]])
        return Z, X
    X = rng.random((n, 2))
    if model == 3:
        u = rng.normal(0.0, 0.1, (n, 2))
        Z = np.column_stack([X[:, 0] + X[:, 1] ** 2 + u[:, 0],
                             (np.exp(X[:, 0]) - 1.0) / 2.0 + u[:, 1]])
    elif model == 4:
        Z = np.column_stack([rng.binomial(3, 0.5, n) / 3.0, rng.binomial(5, 0.2, n) / 5.0])
    elif model == 5:
        W = rng.multinomial(10, [0.25, 0.5, 0.25], n)
        Z = W[:, :2] / 10.0
    elif model == 6:
        w = rng.binomial(1, 0.5, n)
        ind = ((X[:, 0] > 0.0) & (X[:, 0] < 2.0 / 3.0)).astype(float)
        Z = np.column_stack([rng.binomial(5, 0.25, n) / 5.0, 0.5 * (ind + w)])
    else:
        raise ValueError(f"model must be one of {MODELS}, got {model!r}")
    return Z, X


def generate(model: int, n: int, rng) -> Sample:
    """Draw a clean sample (normal errors) from one of the six models."""
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}, got {model!r}")
    if n < 1:
        raise ValueError("n must be positive")
    Z, X = _covariates(model, n, rng)
    signal = MU + Z @ BETA + eta1(X[:, 0]) + eta2(X[:, 1])
    errors = SIGMA * rng.standard_normal(n)
    return Sample(signal + errors, Z, X, signal, errors)


def contaminate(sample: Sample, scheme: str, rng) -> Sample:
    """Apply a contamination scheme; ``errors`` holds ``sigma * eps``.

    C1 redraws ``eps`` from ``0.9 N(0,1) + 0.1 N(0,100)``; C2 redraws
    ``sigma eps`` from ``0.85 N(0, sigma^2) + 0.15 N(15, 0.01)``.  C3 splits
    ``[0,1]^2`` into a 3x3 grid and, in each occupied cell, moves the
    lowest-index observation's ``Z`` to ``(20, 20)`` while its response is
    left untouched.
    """
    n = sample.n
    if scheme == "C0":
        return sample
    if scheme == "C1":
        bad = rng.random(n) < 0.1
        eps = rng.standard_normal(n) * np.where(bad, 10.0, 1.0)
        errors = SIGMA * eps
        return replace(sample, y=sample.signal + errors, errors=errors, contaminated=np.flatnonzero(bad))
    if scheme == "C2":
        bad = rng.random(n) < 0.15
        errors = np.where(bad, rng.normal(15.0, 0.1, n), rng.normal(0.0, SIGMA, n))
        return replace(sample, y=sample.signal + errors, errors=errors, contaminated=np.flatnonzero(bad))
    if scheme == "C3":
        X = sample.X
        if X.shape[1] != 2:
            raise ValueError("C3 needs exactly two smooth covariates")
        cells = np.minimum(np.floor(np.clip(X, 0.0, 1.0) * 3.0), 2).astype(int)
        code = cells[:, 0] * 3 + cells[:, 1]
        _, first = np.unique(code, return_index=True)
        rows = np.sort(first)
        Z = sample.Z.copy()
        Z[rows, :2] = 20.0
        return replace(sample, Z=Z, contaminated=rows)
    raise ValueError(f"contamination must be one of {CONTAMINATIONS}, got {scheme!r}")


def ise(estimate, truth, M: int = 1000, trim_q: int | None = None) -> tuple[float, float]:
    """Integrated squared error on ``M`` equispaced points of ``[0, 1]``.

    ``estimate`` and ``truth`` are callables or arrays already evaluated on
    the grid.  The trimmed version drops the first and last ``trim_q`` points
    (default ``floor(0.05 M)``).
    """
    if M < 2:
        raise ValueError("M must exceed 1")
    q = int(math.floor(0.05 * M)) if trim_q is None else int(trim_q)
    if not 0 <= 2 * q < M:
        raise ValueError("trim_q leaves no grid points")
    grid = np.linspace(0.0, 1.0, M)
    f = np.asarray(estimate(grid) if callable(estimate) else estimate, dtype=float)
    g = np.asarray(truth(grid) if callable(truth) else truth, dtype=float)
    d2 = (f - g) ** 2
    # correctly rounded sums keep the result independent of summation order
    return math.fsum(d2) / M, math.fsum(d2[q:M - q]) / (M - 2 * q)


@dataclass(frozen=True)
class SimulationSpec:
    """One (model, contamination) cell of the Monte Carlo study."""

    model: int = 1
    contamination: str = "C0"
    n: int = 100
    replications: int = 500
    seed: int = 0
    grid_size: int = 1000
    k_grid: tuple | None = None
    n_sub: int = 500

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.contamination not in CONTAMINATIONS:
            raise ValueError(f"contamination must be one of {CONTAMINATIONS}")
        if self.n <= 0 or self.replications <= 0 or self.grid_size <= 1:
            raise ValueError("n and replications must be positive and grid_size > 1")

    @property
    def trim_q(self) -> int:
        return int(math.floor(0.05 * self.grid_size))

    def replication_seed(self, r: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(r,))


@dataclass(frozen=True, eq=False)
class ReplicationRecord:
    replication: int
    method: str
    selected_k: tuple
    ise: tuple
    ise_trim: tuple
    mu_hat: float
    beta_hat: tuple
    curves: np.ndarray | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass(frozen=True)
class SummaryRow:
    """Aggregates over the successful replications of one method."""

    model: int
    contamination: str
    method: str
    n_ok: int
    n_failed: int
    medise: tuple
    mise_5pct: tuple
    mise_trim: tuple
    medise_trim: tuple
    beta_bias: tuple
    beta_sd: tuple
    beta_mse: tuple
    mu_mean: float
    mu_sd: float
    k_proportions: dict

    def long(self) -> list[tuple[str, str, str, float]]:
        """(table, component, metric, value) entries in the reference layout."""
        out = []
        for j in range(len(self.medise)):
            comp = f"eta{j + 1}"
            out += [("eta_ise", comp, "mise_5pct", self.mise_5pct[j]),
                    ("eta_ise", comp, "medise", self.medise[j]),
                    ("eta_ise_trimmed", comp, "mise_trim", self.mise_trim[j]),
                    ("eta_ise_trimmed", comp, "medise_trim", self.medise_trim[j])]
        for j in range(len(self.beta_bias)):
            comp = f"beta{j + 1}"
            out += [("beta", comp, "bias", self.beta_bias[j]),
                    ("beta", comp, "sd", self.beta_sd[j]),
                    ("beta", comp, "mse", self.beta_mse[j])]
        out += [("mu", "mu", "mean", self.mu_mean), ("mu", "mu", "sd", self.mu_sd)]
        return out


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    spec: SimulationSpec
    records: tuple
    summaries: tuple

    def summary(self, method: str) -> SummaryRow:
        return next(s for s in self.summaries if s.method == method)

    def failures(self) -> list[ReplicationRecord]:
        return [r for r in self.records if not r.ok]


def trimmed_mean_top(values, frac: float = 0.05) -> float:
    """Mean after dropping the ``ceil(frac * N)`` largest values."""
    v = np.sort(np.asarray(values, dtype=float))
    drop = math.ceil(frac * v.size)
    kept = v[:v.size - drop] if drop < v.size else v[:1]
    return float(kept.mean())


def _fit_spec(method: str, spec: SimulationSpec, solver_seed: int) -> plam.PlamSpec:
    return plam.PlamSpec(method=method, k_grid=spec.k_grid,
                         solver=SolverConfig(n_sub=spec.n_sub, seed=solver_seed))


def replicate(spec: SimulationSpec, r: int, methods=METHODS) -> list[ReplicationRecord]:
    """Run replication ``r``: draw, contaminate, fit each method, score."""
    ss = spec.replication_seed(r)
    data_seq, solver_seq = ss.spawn(2)
    rng = np.random.default_rng(data_seq)
    sample = contaminate(generate(spec.model, spec.n, rng), spec.contamination, rng)
    solver_seed = int(solver_seq.generate_state(1)[0])
    grid = np.linspace(0.0, 1.0, spec.grid_size)
    out = []
    for method in methods:
        try:
            f = plam.fit(sample.Z, sample.X, sample.y, _fit_spec(method, spec, solver_seed))
        except (RobplamError, ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("replication %d (%s) failed: %s", r, method, exc)
            out.append(ReplicationRecord(r, method, (), (), (), math.nan, (), None, f"{type(exc).__name__}: {exc}"))
            continue
        scores = [ise(f.eta(j, grid), TRUE_ETAS[j](grid), spec.grid_size, spec.trim_q) for j in range(2)]
        curves = np.vstack([f.eta(j, CURVE_GRID) for j in range(2)])
        out.append(ReplicationRecord(r, method, f.selected_k, tuple(s[0] for s in scores),
                                     tuple(s[1] for s in scores), f.mu_hat,
                                     tuple(float(b) for b in f.beta_hat), curves))
    return out


def _replicate_star(args):
    return replicate(*args)


def summarize(spec: SimulationSpec, records, method: str) -> SummaryRow:
    mine = [r for r in records if r.method == method]
    ok = [r for r in mine if r.ok]
    if not ok:
        raise RobplamError(f"every {method} replication failed")
    N = len(ok)
    ise_ = np.array([r.ise for r in ok])
    ise_t = np.array([r.ise_trim for r in ok])
    betas = np.array([r.beta_hat for r in ok])
    mus = np.array([r.mu_hat for r in ok])
    bias = betas.mean(axis=0) - BETA
    sd = betas.std(axis=0, ddof=1) if N > 1 else np.zeros(betas.shape[1])
    mse = bias**2 + sd**2 * (N - 1) / N
    ks = [r.selected_k[0] for r in ok]
    props = {int(k): ks.count(k) / N for k in sorted(set(ks))}
    p = ise_.shape[1]
    return SummaryRow(
        spec.model, spec.contamination, method, N, len(mine) - N,
        tuple(float(np.median(ise_[:, j])) for j in range(p)),
        tuple(trimmed_mean_top(ise_[:, j]) for j in range(p)),
        tuple(float(ise_t[:, j].mean()) for j in range(p)),
        tuple(float(np.median(ise_t[:, j])) for j in range(p)),
        tuple(bias.tolist()), tuple(sd.tolist()), tuple(mse.tolist()),
        float(mus.mean()), float(mus.std(ddof=1)) if N > 1 else 0.0, props)


def run_experiment(spec: SimulationSpec, methods=METHODS, workers: int | None = 1) -> ExperimentResult:
    """Run all replications of one cell and aggregate.

    Each replication draws from its own seed stream, so results do not
    depend on ``workers`` or on execution order.  ``workers=None`` uses every
    available core.
    """
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    workers = (os.cpu_count() or 1) if workers is None else max(1, int(workers))
    jobs = [(spec, r, methods) for r in range(spec.replications)]
    if workers == 1:
        nested = [_replicate_star(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            nested = list(pool.map(_replicate_star, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    records = tuple(rec for group in nested for rec in group)
    for m in methods:
        bad = sum(1 for r in records if r.method == m and not r.ok)
        if bad:
            logger.warning("%s: %d of %d replications failed and were excluded", m, bad, spec.replications)
    summaries = tuple(summarize(spec, records, m) for m in methods)
    return ExperimentResult(spec, records, summaries)


@lru_cache(maxsize=1)
def _reference_records() -> tuple:
    path = resources.files("robplam") / "data" / "reference_values.json"
    return tuple(json.loads(path.read_text(encoding="utf-8"))["records"])


def reference_values(model: int | None = None, contamination: str | None = None) -> list[dict]:
    """Published summary values (N=500, n=100), optionally filtered."""
    return [dict(r) for r in _reference_records()
            if (model is None or r["model"] == model)
            and (contamination is None or r["contamination"] == contamination)]


def reference_value(model, contamination, method, table, component, metric) -> float:
    for r in _reference_records():
        if (r["model"], r["contamination"], r["method"], r["table"], r["component"], r["metric"]) == \
                (model, contamination, method, table, component, metric):
            return r["value"]
    raise KeyError((model, contamination, method, table, component, metric))
