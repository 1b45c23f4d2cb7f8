"""Command-line entry point: ``fit``, ``predict``, ``simulate``, ``bench-tables``.

Exit status is 0 on success, 2 for usage errors, 3 for data problems and 4
for numerical failures.  Failures print a one-line JSON record to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from . import inference, io, plam, simlab
from .exceptions import DatasetError, NumericalError, RobplamError

logger = logging.getLogger("robplam")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _k_grid(text: str):
    if text == "auto":
        return "auto"
    try:
        if "-" in text and "," not in text:
            lo, hi = (int(t) for t in text.split("-"))
            return list(range(lo, hi + 1))
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"k grid must be 'auto', 'a-b' or 'a,b,c', got {text!r}") from None


def _add_common(p):
    p.add_argument("--out", help=f"output directory (default ${io.OUTPUT_DIR_ENV} or ./robplam-out)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robplam", description="Robust partially linear additive models.")
    sub = parser.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to a CSV dataset and write a report")
    f.add_argument("--data", required=True)
    f.add_argument("--response", required=True)
    f.add_argument("--linear", help="linear covariates, e.g. 'Month:categorical,Age'")
    f.add_argument("--smooth", required=True, help="smooth covariates, comma separated")
    f.add_argument("--config", help="JSON run configuration; flags override it")
    f.add_argument("--method", choices=[plam.MM, plam.LS])
    f.add_argument("--knots", choices=["uniform", "quantile"])
    f.add_argument("--centering", choices=["integral", "empirical"])
    f.add_argument("--k-grid", type=_k_grid, help="'auto', a range 'a-b' or a list 'a,b,c'")
    f.add_argument("--inference", choices=list(inference.METHODS))
    f.add_argument("--c0", type=float)
    f.add_argument("--c1", type=float)
    f.add_argument("--b", type=float)
    f.add_argument("--n-sub", type=_positive_int)
    _add_common(f)

    p = sub.add_parser("predict", help="evaluate a saved model on new rows")
    p.add_argument("--model", required=True, help="model.json written by 'fit'")
    p.add_argument("--data", required=True)
    _add_common(p)

    s = sub.add_parser("simulate", help="run one Monte Carlo cell")
    s.add_argument("--model", type=int, choices=simlab.MODELS, required=True)
    s.add_argument("--contamination", choices=simlab.CONTAMINATIONS, required=True)
    s.add_argument("--n", type=_positive_int, default=100)
    s.add_argument("--reps", type=_positive_int, default=500)
    s.add_argument("--workers", type=_positive_int)
    s.add_argument("--n-sub", type=_positive_int, default=500)
    s.add_argument("--k-grid", type=_k_grid, default="auto")
    _add_common(s)

    b = sub.add_parser("bench-tables", help="run every model and contamination and compare with published values")
    b.add_argument("--reps", type=_positive_int, default=500)
    b.add_argument("--n", type=_positive_int, default=100)
    b.add_argument("--models", default=",".join(map(str, simlab.MODELS)))
    b.add_argument("--contaminations", default=",".join(simlab.CONTAMINATIONS))
    b.add_argument("--workers", type=_positive_int)
    b.add_argument("--n-sub", type=_positive_int, default=500)
    _add_common(b)
    return parser


def _out_dir(args) -> Path:
    return Path(args.out) if args.out else io.default_output_dir()


def _run_config(args) -> io.RunConfig:
    try:
        cfg = io.RunConfig.load(args.config) if args.config else io.RunConfig()
    except (OSError, ValueError, TypeError) as exc:
        raise _UsageError(f"bad configuration file: {exc}") from None
    overrides = {}
    for flag, key in (("method", "method"), ("knots", "knots"), ("centering", "centering"),
                      ("inference", "inference"), ("c0", "c0"), ("c1", "c1"), ("b", "b"),
                      ("n_sub", "n_sub"), ("seed", "seed"), ("out", "output_dir")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    if args.k_grid is not None:
        overrides["k_grid"] = None if args.k_grid == "auto" else tuple(args.k_grid)
    try:
        return replace(cfg, **overrides)
    except ValueError as exc:
        raise _UsageError(str(exc)) from None


def cmd_fit(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.output_dir) if cfg.output_dir else io.default_output_dir()
    schema = io.Schema.parse(args.response, args.linear, args.smooth)
    data = io.read_csv(args.data, schema)
    spec = cfg.plam_spec()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = plam.fit(data.Z, data.X, data.y, spec)
        if fit.sigma_hat > 0 and fit.q:
            cov, _ = inference.covariance(fit, data.Z, data.X, cfg.inference)
        else:
            cov = None
    for w in caught:
        logger.warning("%s", w.message)
    flagged = plam.flag_outliers(fit)
    curves = io.curve_table(fit, data.smooth_names)
    io.write_report(fit, cov, curves, out, dataset=data, config=cfg, flagged=flagged)
    io.save_model(fit, data, out / "model.json")
    print(f"selected k = {list(fit.selected_k)}, mu_hat = {fit.mu_hat:.6g}, "
          f"sigma_hat = {fit.sigma_hat:.6g}; report written to {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    fit, schema, levels = io.load_model(args.model)
    schema = io.Schema(None, schema.linear, schema.smooth)
    data = io.read_csv(args.data, schema, levels=levels)
    yhat = plam.predict(fit, data.Z if fit.q else None, data.X)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    io.write_predictions(out / "predictions.csv", data, yhat)
    print(f"{len(yhat)} predictions written to {out / 'predictions.csv'}")
    return EXIT_OK


def _sim_spec(args, model, contamination) -> simlab.SimulationSpec:
    k_grid = None if getattr(args, "k_grid", "auto") == "auto" else tuple(args.k_grid)
    return simlab.SimulationSpec(model, contamination, n=args.n, replications=args.reps,
                                 seed=args.seed if args.seed is not None else 0,
                                 k_grid=k_grid, n_sub=args.n_sub)


def cmd_simulate(args) -> int:
    spec = _sim_spec(args, args.model, args.contamination)
    result = simlab.run_experiment(spec, workers=args.workers)
    paths = io.write_simulation(result, _out_dir(args))
    print(f"summary written to {paths['summary']}")
    return EXIT_OK


def cmd_bench_tables(args) -> int:
    try:
        models = [int(m) for m in args.models.split(",")]
        conts = [c.strip() for c in args.contaminations.split(",")]
        for m in models:
            if m not in simlab.MODELS:
                raise ValueError(f"unknown model {m}")
        for c in conts:
            if c not in simlab.CONTAMINATIONS:
                raise ValueError(f"unknown contamination {c}")
    except ValueError as exc:
        raise _UsageError(str(exc)) from None
    out = _out_dir(args)
    results, failed = [], []
    for m in models:
        for c in conts:
            spec = _sim_spec(args, m, c)
            logger.info("running model %d %s", m, c)
            try:
                res = simlab.run_experiment(spec, workers=args.workers)
            except RobplamError as exc:
                failed.append({"model": m, "contamination": c, "error": str(exc)})
                logger.error("model %d %s failed: %s", m, c, exc)
                continue
            io.write_simulation(res, out)
            results.append(res)
    io.write_comparison(results, out / "comparison.csv")
    io.write_json(out / "bench_status.json", {"completed": [[r.spec.model, r.spec.contamination] for r in results],
                                              "failed": failed, "replications": args.reps,
                                              "seed": args.seed if args.seed is not None else 0})
    print(f"{len(results)} cells written to {out}; comparison in {out / 'comparison.csv'}")
    return EXIT_OK


class _UsageError(Exception):
    pass


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate, "bench-tables": cmd_bench_tables}


def _error(code: str, message: str, status: int) -> int:
    print(json.dumps({"error": code, "message": message, "exit_status": status}), file=sys.stderr)
    return status


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        return _error("USAGE", str(exc), EXIT_USAGE)
    except DatasetError as exc:
        return _error(exc.code, str(exc), EXIT_DATA)
    except NumericalError as exc:
        return _error(exc.code, str(exc), EXIT_NUMERICAL)
    except RobplamError as exc:
        return _error(exc.code, str(exc), exc.exit_status)
    except ValueError as exc:
        # remaining value errors come from the data (constant covariate, too few rows, ...)
        return _error(DatasetError.code, str(exc), EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
