"""Command-line front end: fit, predict, score, dependence, simulate.

A fit produces an archive directory of plain-text files (margin, knot
grids, parameter draws or variational parameters, config echo, run log)
from which every other command can reconstruct the model. Exit codes:
0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .bases import load_knot_grid, save_knot_grid
from .config import Dataset, RunConfig, build_config, config_echo, ingest_csv, parse_config_file
from .copula import PosteriorDraws, theta_labels
from .dependence import dependence_surface, save_surface_csv
from .errors import ConfigurationError, DataError, NumericalError, RegCopulaError
from .fitting import CovariateScaling, FittedModel, default_template, fit_model
from .margins import load_margin, save_margin
from .mcmc import load_chain_thetas, save_chain
from .predict import (
    PredictiveInput,
    moment_functions,
    predictive_density_mc,
    predictive_quantile,
    simulate_replicate,
)
from .scoring import cross_validate, save_report, score_external
from .vb import load_vparams, save_vparams

ARCHIVE_VERSION = "regcopula-archive-v1"


class UsageError(RegCopulaError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        raise UsageError(message)


# -- archive -------------------------------------------------------------------

def save_archive(out_dir, config: RunConfig, fitted: FittedModel, dataset: Dataset) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "VERSION").write_text(ARCHIVE_VERSION + "\n")
    (out / "config.txt").write_text(config_echo(config))
    save_margin(out / "margin.txt", fitted.margin)
    save_knot_grid(out / "knots_mean.txt", fitted.mean_knots)
    if fitted.var_knots is not None:
        save_knot_grid(out / "knots_var.txt", fitted.var_knots)
    if fitted.scaling is not None:
        with open(out / "scaling.txt", "w") as fh:
            fh.write(" ".join(f"{v:.17g}" for v in fitted.scaling.mins) + "\n")
            fh.write(" ".join(f"{v:.17g}" for v in fitted.scaling.maxs) + "\n")
    with open(out / "covariates.csv", "w") as fh:
        fh.write(",".join(dataset.x_names) + ";" + ",".join(dataset.w_names) + "\n")
        for xr, wr in zip(dataset.X, dataset.W):
            fh.write(",".join(f"{v:.17g}" for v in xr) + ";" + ",".join(f"{v:.17g}" for v in wr) + "\n")
    log_lines = [f"seed={config.seed}"]
    if fitted.chain is not None:
        save_chain(out / "chain.txt", fitted.chain)
        for name, rate in fitted.chain.acceptance.items():
            log_lines.append(f"accept_{name}={rate:.6f}")
        log_lines.append(f"eps_final={fitted.chain.eps_final:.6g}")
    else:
        save_vparams(out / "vparams.txt", fitted.vparams)
        log_lines.append(f"rejected_steps={fitted.trace.rejected_steps}")
        log_lines.append(f"lb_bar={fitted.trace.lb_bar:.6f}")
        log_lines.append("lb_trace=" + " ".join(f"{v:.6g}" for v in fitted.trace.lower_bound_estimates))
    (out / "runlog.txt").write_text("\n".join(log_lines) + "\n")


def load_archive(archive_dir) -> tuple[RunConfig, FittedModel, np.ndarray, np.ndarray]:
    arch = Path(archive_dir)
    version_file = arch / "VERSION"
    if not arch.is_dir() or not version_file.exists():
        raise DataError(f"{archive_dir}: not a model archive")
    version = version_file.read_text().strip()
    if version != ARCHIVE_VERSION:
        raise DataError(f"{archive_dir}: unsupported archive version {version!r}")
    config = build_config(parse_config_file(arch / "config.txt"))
    margin = load_margin(arch / "margin.txt")
    mean_knots = load_knot_grid(arch / "knots_mean.txt")
    var_knots = load_knot_grid(arch / "knots_var.txt") if (arch / "knots_var.txt").exists() else None
    scaling = None
    if (arch / "scaling.txt").exists():
        rows = (arch / "scaling.txt").read_text().splitlines()
        scaling = CovariateScaling(np.array([float(v) for v in rows[0].split()]),
                                   np.array([float(v) for v in rows[1].split()]))
    p1 = mean_knots.basis_size
    p2 = var_knots.basis_size if var_knots is not None else 0
    template = default_template(config.model, p1, p2)
    fitted = FittedModel(config, margin, mean_knots, var_knots, scaling, template)
    if (arch / "chain.txt").exists():
        labels, thetas = load_chain_thetas(arch / "chain.txt")
        if labels != theta_labels(template):
            raise DataError(f"{archive_dir}: chain columns do not match the configured model")
        from .mcmc import ChainOutput

        fitted.chain = ChainOutput(PosteriorDraws(thetas, template, "mcmc"), {}, config.seed)
    elif (arch / "vparams.txt").exists():
        fitted.vparams = load_vparams(arch / "vparams.txt")
        if fitted.vparams.p != len(theta_labels(template)):
            raise DataError(f"{archive_dir}: vparams dimension does not match the configured model")
    else:
        raise DataError(f"{archive_dir}: archive holds neither draws nor variational parameters")
    X, W = _load_covariates(arch / "covariates.csv")
    return config, fitted, X, W


def _load_covariates(path):
    with open(path) as fh:
        fh.readline()
        xs, ws = [], []
        for line in fh:
            xpart, wpart = line.strip().split(";")
            xs.append([float(v) for v in xpart.split(",")])
            ws.append([float(v) for v in wpart.split(",")])
    return np.array(xs), np.array(ws)


# -- commands ------------------------------------------------------------------

def cmd_fit(args) -> int:
    overrides = {"model": args.model, "estimator": args.estimator, "seed": args.seed}
    overrides.update(_parse_sets(args.set))
    file_values = parse_config_file(args.config) if args.config else {}
    config = build_config(file_values, overrides)
    dataset = ingest_csv(args.data, config)
    fitted = fit_model(config, dataset)
    save_archive(args.out, config, fitted, dataset)
    print(f"fitted {config.model} via {config.estimator}; archive at {args.out}")
    return 0


def _parse_sets(pairs):
    from .config import _parse_value

    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        out[key.strip()] = _parse_value(key.strip(), raw)
    return out


def _read_points(path, config: RunConfig):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty points file") from None
        x_cols = list(config.x_columns) or [h for h in header if h != config.response]
        w_cols = list(config.w_columns) if config.w_columns is not None else x_cols
        missing = [c for c in set(x_cols + w_cols) if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        xs, ws = [], []
        for rownum, row in enumerate(reader, start=2):
            if not any(c.strip() for c in row):
                continue
            try:
                xs.append([float(row[header.index(c)]) for c in x_cols])
                ws.append([float(row[header.index(c)]) for c in w_cols])
            except ValueError as exc:
                raise DataError(f"{path}: bad value at row {rownum}: {exc}") from None
    if not xs:
        raise DataError(f"{path}: no prediction points")
    return np.array(xs), np.array(ws)


def cmd_predict(args) -> int:
    config, fitted, _, _ = load_archive(args.archive)
    X_new, W_new = _read_points(args.points, config)
    outputs = [s.strip() for s in args.outputs.split(",")]
    unknown = set(outputs) - {"density", "moments", "quantiles"}
    if unknown:
        raise UsageError(f"unknown outputs {sorted(unknown)}")
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else [0.25, 0.5, 0.95, 0.99]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.point_estimate:
        draws = PosteriorDraws.from_states([fitted.point_state()], "point")
    else:
        draws = fitted.posterior_draws(args.draws, seed=config.seed + 1)
    B_new, V_new = fitted.basis_rows(X_new, W_new)
    dens_rows, mom_rows, quant_rows = [], [], []
    for i in range(X_new.shape[0]):
        pt = PredictiveInput(B_new[i], V_new[i], X_new[i], W_new[i])
        if "density" in outputs:
            dg = predictive_density_mc(pt, draws, fitted.margin)
            dens_rows.extend((i, y, d) for y, d in zip(dg.y_grid, dg.density_values))
        if "moments" in outputs:
            f_hat, v_hat = moment_functions(pt, draws, fitted.margin)
            mom_rows.append((i, f_hat, v_hat))
        if "quantiles" in outputs:
            for a in alphas:
                quant_rows.append((i, a, predictive_quantile(pt, draws, fitted.margin, a)))
    if dens_rows:
        _write_csv(out / "densities.csv", ("point_id", "y", "density"), dens_rows)
    if mom_rows:
        _write_csv(out / "moments.csv", ("point_id", "f_hat", "v_hat"), mom_rows)
    if quant_rows:
        _write_csv(out / "quantiles.csv", ("point_id", "alpha", "quantile"), quant_rows)
    print(f"wrote {', '.join(outputs)} for {X_new.shape[0]} points to {out}")
    return 0


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.17g}" if isinstance(v, float) else str(v) for v in row) + "\n")


def cmd_score(args) -> int:
    if (args.archive is None) == (args.forecasts is None):
        raise UsageError("score needs exactly one of --archive or --forecasts")
    if args.forecasts is not None:
        config = build_config(parse_config_file(args.config)) if args.config else RunConfig()
        dataset = ingest_csv(args.data, config)
        report = score_external(args.forecasts, dataset.y)
    else:
        config, _, _, _ = load_archive(args.archive)
        dataset = ingest_csv(args.data, config)
        report = cross_validate(
            dataset, config, k=args.folds, seed=args.seed,
            export_path=args.export_forecasts,
        )
    save_report(args.out, report)
    print(f"mean log score {report.mean_log_score:.4f}, mean crps {report.mean_crps:.4f}; report at {args.out}")
    return 0


def cmd_dependence(args) -> int:
    config, fitted, X, _ = load_archive(args.archive)
    draws = fitted.posterior_draws(args.draws, seed=config.seed + 2)
    dim = args.dim - 1
    if not (0 <= dim < X.shape[1]):
        raise UsageError(f"--dim {args.dim} out of range for {X.shape[1]} covariates")
    lo = X[:, dim].min() if args.grid_min is None else args.grid_min
    hi = X[:, dim].max() if args.grid_max is None else args.grid_max
    clipped = False
    if lo < X[:, dim].min() or hi > X[:, dim].max():
        lo, hi = max(lo, X[:, dim].min()), min(hi, X[:, dim].max())
        clipped = True
    grid = np.linspace(lo, hi, args.grid_size)
    base = np.median(X, axis=0)
    if args.base:
        base = np.array([float(v) for v in args.base.split(",")])
        if base.size != X.shape[1]:
            raise UsageError(f"--base needs {X.shape[1]} values")

    def builder(xs):
        pts = np.tile(base, (xs.size, 1))
        pts[:, dim] = xs
        return fitted.basis_rows(pts, pts)

    surface = dependence_surface(args.metric, grid, draws, builder, q=args.q)
    save_surface_csv(args.out, surface)
    note = " (grid clipped to training range)" if clipped else ""
    print(f"wrote {args.metric} surface ({args.grid_size}x{args.grid_size}) to {args.out}{note}")
    if clipped:
        print("warning: requested grid extended beyond the training range", file=sys.stderr)
    return 0


def cmd_simulate(args) -> int:
    config, fitted, X, W = load_archive(args.archive)
    B, V = fitted.basis_rows(X, W)
    from .bases import make_design

    design = make_design(B, V)
    state = fitted.point_state()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rep in range(args.replicates + 1):
        rng = np.random.default_rng([args.seed, rep])
        y = simulate_replicate(state, design, fitted.margin, rng)
        name = "holdout.csv" if rep == args.replicates else f"replicate_{rep + 1:03d}.csv"
        with open(out / name, "w") as fh:
            fh.write("y\n")
            for v in y:
                fh.write(f"{v:.17g}\n")
    print(f"wrote {args.replicates} replicates plus a held-out replicate to {out}")
    return 0


# -- entry point -----------------------------------------------------------------

def make_parser() -> _Parser:
    parser = _Parser(prog="regcopula", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a model and write an archive")
    fit.add_argument("--config", default=None)
    fit.add_argument("--data", required=True)
    fit.add_argument("--out", required=True)
    fit.add_argument("--model", default=None, choices=["psc", "hpsc", "hrbfc"])
    fit.add_argument("--estimator", default=None, choices=["mcmc", "vb"])
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--set", action="append", metavar="KEY=VALUE")
    fit.set_defaults(func=cmd_fit)

    pred = sub.add_parser("predict", help="predictive densities, moments, quantiles")
    pred.add_argument("--archive", required=True)
    pred.add_argument("--points", required=True)
    pred.add_argument("--out", required=True)
    pred.add_argument("--outputs", default="density,moments,quantiles")
    pred.add_argument("--alphas", default=None)
    pred.add_argument("--draws", type=int, default=1000)
    pred.add_argument("--point-estimate", action="store_true")
    pred.set_defaults(func=cmd_predict)

    score = sub.add_parser("score", help="cross-validated or external-forecast scores")
    score.add_argument("--archive", default=None)
    score.add_argument("--forecasts", default=None)
    score.add_argument("--config", default=None)
    score.add_argument("--data", required=True)
    score.add_argument("--out", required=True)
    score.add_argument("--folds", type=int, default=10)
    score.add_argument("--seed", type=int, default=0)
    score.add_argument("--export-forecasts", default=None)
    score.set_defaults(func=cmd_score)

    dep = sub.add_parser("dependence", help="pairwise dependence surface")
    dep.add_argument("--archive", required=True)
    dep.add_argument("--out", required=True)
    dep.add_argument("--metric", default="spearman",
                     choices=["spearman", "kendall", "quantile_lower", "quantile_upper"])
    dep.add_argument("--q", type=float, default=None)
    dep.add_argument("--grid-size", type=int, default=50)
    dep.add_argument("--grid-min", type=float, default=None)
    dep.add_argument("--grid-max", type=float, default=None)
    dep.add_argument("--dim", type=int, default=1)
    dep.add_argument("--base", default=None)
    dep.add_argument("--draws", type=int, default=200)
    dep.set_defaults(func=cmd_dependence)

    sim = sub.add_parser("simulate", help="replicate datasets from a fitted model")
    sim.add_argument("--archive", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--replicates", type=int, default=100)
    sim.add_argument("--seed", type=int, default=0)
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
