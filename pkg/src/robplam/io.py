"""Dataset ingestion, run configuration and report serialization.

Reports are plain CSV and JSON.  Floats in CSV files are written with 17
significant digits so that re-reading them reproduces the in-memory values
bit for bit; JSON uses Python's shortest round-trip representation, which
is equally lossless.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import plam
from .bsplines import EMPIRICAL, INTEGRAL, QUANTILE, UNIFORM, CenteredSplineBasis
from .exceptions import DatasetError, DatasetSchemaError, RobplamError
from .rho import tukey
from .robust_solvers import SolverConfig

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "ROBPLAM_OUTPUT_DIR"
NUMERIC = "numeric"
CATEGORICAL = "categorical"


def fmt(x) -> str:
    """17 significant digits; empty string for missing values."""
    x = float(x)
    if math.isnan(x):
        return ""
    return f"{x:.17g}"


# --------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class Schema:
    """Column roles.  ``linear`` holds ``(name, kind)`` pairs."""

    response: str | None
    linear: tuple = ()
    smooth: tuple = ()

    @classmethod
    def parse(cls, response, linear: str | None, smooth: str | None) -> "Schema":
        """Build from flag strings such as ``"Month:categorical,Age"``."""
        lin = []
        for item in _split(linear):
            name, _, kind = item.partition(":")
            kind = kind or NUMERIC
            if kind not in (NUMERIC, CATEGORICAL):
                raise DatasetSchemaError(f"unknown column kind {kind!r} for {name!r}")
            lin.append((name, kind))
        return cls(response, tuple(lin), tuple(_split(smooth)))

    def to_dict(self) -> dict:
        return {"response": self.response, "linear": [list(p) for p in self.linear],
                "smooth": list(self.smooth)}

    @classmethod
    def from_dict(cls, d) -> "Schema":
        return cls(d.get("response"), tuple(tuple(p) for p in d.get("linear", ())), tuple(d.get("smooth", ())))


def _split(s) -> list[str]:
    if s is None:
        return []
    if isinstance(s, (list, tuple)):
        return [str(x) for x in s]
    return [p.strip() for p in str(s).split(",") if p.strip()]


@dataclass(frozen=True, eq=False)
class Dataset:
    schema: Schema
    y: np.ndarray | None
    Z: np.ndarray
    X: np.ndarray
    linear_names: tuple
    smooth_names: tuple
    levels: dict
    source_rows: np.ndarray
    n_dropped: int

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def decode(self, column: str) -> np.ndarray:
        """Rebuild a categorical column from its dummy block."""
        lv = self.levels[column]
        idx = [self.linear_names.index(_dummy_name(column, v)) for v in lv[1:]]
        block = self.Z[:, idx]
        codes = np.where(block.sum(axis=1) == 0, 0, block.argmax(axis=1) + 1)
        return np.asarray(lv, dtype=object)[codes]


def _dummy_name(column, level) -> str:
    return f"{column}_{level}"


def _level_key(v):
    return (0, float(v), "") if isinstance(v, (int, float, np.integer, np.floating)) else (1, 0.0, str(v))


def _tidy_level(v):
    if isinstance(v, (float, np.floating)) and float(v).is_integer():
        return int(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path, schema: Schema, levels: dict | None = None) -> Dataset:
    """Load a comma-separated file and apply column roles.

    Rows with a missing value in any used column are dropped and counted.
    Categorical columns become reference-coded dummies (first sorted level
    dropped); pass ``levels`` to reuse the coding of an earlier fit.
    """
    if not schema.smooth:
        raise DatasetSchemaError("at least one smooth covariate is required")
    try:
        df = pd.read_csv(path, sep=",", decimal=".", encoding="utf-8")
    except FileNotFoundError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DatasetError(f"cannot parse {path}: {exc}") from exc
    used = ([schema.response] if schema.response else []) + [n for n, _ in schema.linear] + list(schema.smooth)
    missing = [c for c in used if c not in df.columns]
    if missing:
        raise DatasetSchemaError(f"missing columns: {', '.join(missing)}")
    if len(set(used)) != len(used):
        raise DatasetSchemaError("a column is assigned more than one role")
    cat_cols = {n for n, k in schema.linear if k == CATEGORICAL}
    for c in used:
        if c in cat_cols:
            continue
        try:
            df[c] = pd.to_numeric(df[c], errors="raise")
        except (ValueError, TypeError) as exc:
            raise DatasetError(f"column {c!r} is not numeric: {exc}") from exc
    mask = df[used].notna().all(axis=1).to_numpy()
    for c in used:
        if c not in cat_cols:
            mask &= np.isfinite(df[c].to_numpy(dtype=float))
    n_dropped = int((~mask).sum())
    df = df.loc[mask]
    if df.empty:
        raise DatasetError("no complete rows remain after dropping missing values")
    if n_dropped:
        logger.info("dropped %d rows with missing values", n_dropped)

    levels = dict(levels or {})
    zcols, znames = [], []
    for name, kind in schema.linear:
        col = df[name]
        if kind == NUMERIC:
            zcols.append(col.to_numpy(dtype=float))
            znames.append(name)
            continue
        values = [_tidy_level(v) for v in col.tolist()]
        lv = levels.get(name)
        if lv is None:
            lv = sorted(set(values), key=_level_key)
            if len(lv) < 2:
                raise DatasetError(f"categorical column {name!r} has a single level")
            levels[name] = lv
        unknown = set(values) - set(lv)
        if unknown:
            raise DatasetError(f"column {name!r} has levels unseen at fit time: {sorted(map(str, unknown))}")
        for v in lv[1:]:
            zcols.append(np.array([1.0 if x == v else 0.0 for x in values]))
            znames.append(_dummy_name(name, v))
    n = len(df)
    Z = np.column_stack(zcols) if zcols else np.empty((n, 0))
    X = df[list(schema.smooth)].to_numpy(dtype=float)
    y = df[schema.response].to_numpy(dtype=float) if schema.response else None
    rows = np.flatnonzero(mask) + 1
    return Dataset(schema, y, Z, X, tuple(znames), tuple(schema.smooth), levels, rows, n_dropped)


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class RunConfig:
    """Every knob of a fit, fully defaulted; round-trips through JSON."""

    method: str = plam.MM
    c0: float = 1.54764
    b: float = 0.5
    c1: float = 4.685
    k_grid: tuple | None = None
    knots: str = UNIFORM
    centering: str = EMPIRICAL
    seed: int = 0
    n_sub: int = 500
    k_istep: int = 2
    best_keep: int = 5
    tol: float = 1e-7
    max_iter: int = 200
    inference: str = "plugin_weighted"
    output_dir: str | None = None

    def __post_init__(self):
        if self.method not in (plam.MM, plam.LS):
            raise ValueError(f"method must be 'mm' or 'ls', got {self.method!r}")
        if self.knots not in (UNIFORM, QUANTILE):
            raise ValueError(f"knots must be 'uniform' or 'quantile', got {self.knots!r}")
        if self.centering not in (INTEGRAL, EMPIRICAL):
            raise ValueError(f"centering must be 'integral' or 'empirical', got {self.centering!r}")
        if self.inference not in ("plugin_plain", "plugin_weighted", "sandwich"):
            raise ValueError(f"unknown inference method {self.inference!r}")
        if self.k_grid is not None:
            object.__setattr__(self, "k_grid", tuple(int(k) for k in self.k_grid))

    def solver(self) -> SolverConfig:
        return SolverConfig(n_sub=self.n_sub, k_istep=self.k_istep, best_keep=self.best_keep,
                            tol=self.tol, max_iter=self.max_iter, seed=self.seed)

    def plam_spec(self) -> plam.PlamSpec:
        return plam.PlamSpec(method=self.method, k_grid=self.k_grid, knots=self.knots,
                             centering=self.centering, rho0=tukey(self.c0), b=self.b,
                             rho1=tukey(self.c1), solver=self.solver())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_grid"] = list(self.k_grid) if self.k_grid is not None else "auto"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown configuration keys: {sorted(extra)}")
        d = dict(d)
        if d.get("k_grid") in ("auto", None):
            d["k_grid"] = None
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "robplam-out"))


# --------------------------------------------------------------------------
# fit reports

def curve_grid(basis: CenteredSplineBasis, points: int = 100) -> np.ndarray:
    """``points`` equispaced values covering the central 90% of the basis interval."""
    width = basis.hi - basis.lo
    return np.linspace(basis.lo + 0.05 * width, basis.hi - 0.05 * width, points)


def curve_table(fit: plam.PlamFit, names, points: int = 100) -> dict:
    return {name: (x, fit.eta(j, x)) for j, name in enumerate(names)
            for x in [curve_grid(fit.bases[j], points)]}


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n",
                          encoding="utf-8")


def write_report(fit: plam.PlamFit, covariance, curves: dict, path, *, dataset: Dataset | None = None,
                 config: RunConfig | None = None, flagged=None) -> dict:
    """Write the fit report into directory ``path``.

    Files: ``coefficients.csv`` (name, estimate, std_error), ``curves.csv``
    (component, x, eta), ``residuals.csv`` (row, source_row, fitted,
    residual, outlier) and ``summary.json``.  Returns the file paths.
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RobplamError(f"cannot create output directory {out}: {exc}") from exc
    names = dataset.linear_names if dataset is not None else tuple(f"z{m + 1}" for m in range(fit.q))
    se = covariance.std_errors if covariance is not None else np.full(fit.q, np.nan)
    paths = {k: out / f for k, f in (("coefficients", "coefficients.csv"), ("curves", "curves.csv"),
                                     ("residuals", "residuals.csv"), ("summary", "summary.json"))}
    _write_rows(paths["coefficients"], ["name", "estimate", "std_error"],
                [["(Intercept)", fmt(fit.mu_hat), ""]]
                + [[nm, fmt(b), fmt(s)] for nm, b, s in zip(names, fit.beta_hat, se)])
    _write_rows(paths["curves"], ["component", "x", "eta"],
                [[name, fmt(a), fmt(b)] for name, (x, e) in curves.items() for a, b in zip(x, e)])
    flagged = set(int(i) for i in (plam.flag_outliers(fit) if flagged is None else flagged))
    n = fit.n
    src = dataset.source_rows if dataset is not None else np.arange(1, n + 1)
    y_fitted = (dataset.y - fit.residuals) if dataset is not None and dataset.y is not None \
        else np.full(n, np.nan)
    _write_rows(paths["residuals"], ["row", "source_row", "fitted", "residual", "outlier"],
                [[i + 1, int(src[i]), fmt(y_fitted[i]), fmt(fit.residuals[i]), int(i in flagged)]
                 for i in range(n)])
    summary = {
        "method": fit.method,
        "n": n,
        "n_dropped": dataset.n_dropped if dataset is not None else 0,
        "selected_k": list(fit.selected_k),
        "sigma_hat": fit.sigma_hat,
        "mu_hat": fit.mu_hat,
        "beta_hat": dict(zip(names, fit.beta_hat.tolist())),
        "std_errors": dict(zip(names, np.asarray(se).tolist())),
        "criterion_trace": [{"k": list(k), "criterion": c} for k, c in fit.criterion_trace],
        "outliers": sorted(i + 1 for i in flagged),
        "config": config.to_dict() if config is not None else None,
        "schema": dataset.schema.to_dict() if dataset is not None else None,
    }
    if covariance is not None:
        summary["covariance"] = {"method": covariance.method, "upsilon_hat": covariance.upsilon_hat,
                                 "Sigma_hat": covariance.Sigma_hat.tolist()}
    write_json(paths["summary"], summary)
    return paths


def read_coefficients(path) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=False, na_values=[""], float_precision="round_trip")


def read_curves(path) -> dict:
    df = pd.read_csv(path, float_precision="round_trip")
    return {name: (g["x"].to_numpy(), g["eta"].to_numpy()) for name, g in df.groupby("component", sort=False)}


def read_residuals(path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


# --------------------------------------------------------------------------
# saved models (used by ``predict``)

def save_model(fit: plam.PlamFit, dataset: Dataset, path):
    write_json(path, {
        "method": fit.method,
        "coefficients": fit.coefficients.tolist(),
        "q": fit.q,
        "sigma_hat": fit.sigma_hat,
        "selected_k": list(fit.selected_k),
        "bases": [b.to_dict() for b in fit.bases],
        "schema": dataset.schema.to_dict(),
        "levels": {k: list(v) for k, v in dataset.levels.items()},
        "linear_names": list(dataset.linear_names),
    })


def load_model(path) -> tuple[plam.PlamFit, Schema, dict]:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        bases = tuple(CenteredSplineBasis.from_dict(b) for b in d["bases"])
        fit = plam.PlamFit(d["method"], np.asarray(d["coefficients"], dtype=float), int(d["q"]), bases,
                           float(d["sigma_hat"]), np.empty(0), tuple(d["selected_k"]), ())
        return fit, Schema.from_dict(d["schema"]), d.get("levels", {})
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise DatasetError(f"cannot load model {path}: {exc}") from exc


def write_predictions(path, dataset: Dataset, yhat):
    _write_rows(Path(path), ["source_row", "prediction"],
                [[int(r), fmt(v)] for r, v in zip(dataset.source_rows, yhat)])


# --------------------------------------------------------------------------
# simulation outputs

def write_simulation(result, directory) -> dict:
    """Summary table, k-selection proportions and curve matrices of one cell."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    spec = result.spec
    stem = f"model{spec.model}_{spec.contamination}"
    by_method = {s.method: dict(((t, c, m), v) for t, c, m, v in s.long()) for s in result.summaries}
    methods = [s.method for s in result.summaries]
    keys = list(by_method[methods[0]])
    paths = {"summary": d / f"summary_{stem}.csv", "k": d / f"kselect_{stem}.csv",
             "curves": d / f"curves_{stem}.csv"}
    _write_rows(paths["summary"], ["table", "component", "metric", *methods, "n_ok", "n_failed"],
                [[t, c, m, *(fmt(by_method[me][(t, c, m)]) for me in methods),
                  "/".join(str(s.n_ok) for s in result.summaries),
                  "/".join(str(s.n_failed) for s in result.summaries)] for t, c, m in keys])
    ks = sorted({k for s in result.summaries for k in s.k_proportions})
    _write_rows(paths["k"], ["method", "k", "proportion"],
                [[s.method, k, fmt(s.k_proportions.get(k, 0.0))] for s in result.summaries for k in ks])
    from .simlab import CURVE_GRID
    rows = []
    for r in result.records:
        if r.ok:
            for j, c in enumerate(r.curves):
                rows.append([r.method, f"eta{j + 1}", r.replication, *(fmt(v) for v in c)])
    _write_rows(paths["curves"], ["method", "component", "replication", *(fmt(x) for x in CURVE_GRID)], rows)
    return paths


def write_comparison(results, path):
    """Published value vs reproduced value for every reported cell."""
    from .simlab import reference_values
    rows = []
    for res in results:
        spec = res.spec
        ours = {(s.method, t, c, m): v for s in res.summaries for t, c, m, v in s.long()}
        for ref in reference_values(spec.model, spec.contamination):
            key = (ref["method"], ref["table"], ref["component"], ref["metric"])
            mine = ours.get(key, math.nan)
            dev = (mine - ref["value"]) / abs(ref["value"]) if ref["value"] != 0 else math.nan
            rows.append([spec.model, spec.contamination, ref["method"], ref["table"], ref["component"],
                         ref["metric"], fmt(ref["value"]), fmt(mine), fmt(dev)])
    _write_rows(Path(path), ["model", "contamination", "method", "table", "component", "metric",
                             "published", "reproduced", "relative_deviation"], rows)
