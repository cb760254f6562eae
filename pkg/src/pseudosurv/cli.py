"""Command-line interface: analyze a trial CSV, run simulations, dump
pseudo-observations.

Input is a headered CSV with a time column, a 0/1 status column, a 0/1
arm column, and optional numeric covariates.  Outputs are plain CSV files
(coefficients, forest-plot data, metrics, optional draws) plus a resolved
configuration copy next to them, so every run is reproducible.  Exit
codes: 0 success, 1 usage error, 2 data error, 3 convergence failures.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from pathlib import Path

import numpy as np

from .bayes import PriorSpec, fit_bayes_gmm
from .bench import fit_cox, fit_pem
from .design import build_design
from .gee import fit_gee, wald_interval
from .gmm import fit_gmm
from .pseudo import pseudo_observations
from .sim import (
    METHODS,
    MetricsRow,
    RunOptions,
    SAMPLE_SIZES,
    Scenario,
    metrics_to_csv,
    run_scenario,
)
from .survival import SurvivalDataset, select_time_grid

THREADS_ENV = "PSEUDOSURV_THREADS"


class UsageError(Exception):
    exit_code = 1


class DataError(Exception):
    exit_code = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_config(path) -> dict[str, str]:
    """Flat `key = value` file; '#' starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def read_trial_csv(path, time_col, status_col, arm_col, covariate_cols):
    """Parse a trial CSV into a SurvivalDataset; errors carry line numbers."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        index = {name.strip(): i for i, name in enumerate(header)}
        needed = [time_col, status_col, arm_col, *covariate_cols]
        missing = [c for c in needed if c not in index]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        time, status, arm, cov = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                time.append(float(row[index[time_col]]))
                status_value = float(row[index[status_col]])
                arm_value = float(row[index[arm_col]])
                cov.append([float(row[index[c]]) for c in covariate_cols])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if status_value not in (0.0, 1.0):
                raise DataError(f"{path}:{lineno}: status must be 0 or 1")
            if arm_value not in (0.0, 1.0):
                raise DataError(f"{path}:{lineno}: arm must be 0 or 1")
            status.append(int(status_value))
            arm.append(int(arm_value))
    if not time:
        raise DataError(f"{path}: no data rows")
    try:
        return SurvivalDataset(
            time=np.array(time),
            status=np.array(status),
            arm=np.array(arm),
            covariates=np.array(cov) if covariate_cols else None,
            covariate_names=tuple(covariate_cols),
        )
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


def _write_resolved_config(outdir: Path, args: argparse.Namespace):
    lines = []
    for key in sorted(vars(args)):
        if key in ("func", "config"):
            continue
        lines.append(f"{key} = {getattr(args, key)}")
    (outdir / "resolved-config.txt").write_text("\n".join(lines) + "\n")


def cmd_analyze(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise UsageError("empty methods list")
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    covariates = tuple(c.strip() for c in args.covariates.split(",") if c.strip())
    data = read_trial_csv(args.input, args.time_col, args.status_col,
                          args.arm_col, covariates)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    thresholds = [float(x) for x in args.tail.split(",") if x.strip()] if args.tail else []

    needs_pseudo = any(m in ("gee", "gmm", "bayes-gmm") for m in methods)
    pom = X = None
    if needs_pseudo:
        grid = select_time_grid(data, args.k)
        pom = pseudo_observations(data, grid)
        X = build_design(data, grid)

    options = RunOptions(
        K=args.k, correlation=args.correlation,
        chains=args.chains, iterations=args.iterations,
        warmup=args.warmup, thin=args.thin,
    )
    prior = (
        PriorSpec(kind="normal", scale=args.prior_sd)
        if args.prior_sd is not None
        else None
    )
    coef_rows, forest_rows, diag_rows, tail_rows = [], [], [], []
    any_flagged = False
    for method in methods:
        if method == "cox":
            fit = fit_cox(data, covariates=covariates)
            any_flagged |= not fit.converged
            _collect_frequentist(method, fit, 0, coef_rows, forest_rows)
        elif method in ("gee", "gmm"):
            fit = (
                fit_gee(pom, X, args.correlation)
                if method == "gee"
                else fit_gmm(pom, X, args.correlation)
            )
            any_flagged |= not fit.converged
            _collect_frequentist(method, fit, 1, coef_rows, forest_rows)
        elif method == "pem":
            fit = fit_pem(
                data,
                config=options.sampler_config(args.seed),
                covariates=covariates,
                tail={0: thresholds} if thresholds else None,
            )
            any_flagged |= fit.flagged
            offset = fit.spec.M
            _collect_bayes(method, fit.summary, fit.names, offset,
                           coef_rows, forest_rows, diag_rows, tail_rows,
                           args.dump_draws, fit.draws, outdir)
        else:  # bayes-gmm
            fit = fit_bayes_gmm(
                pom, X, basis=args.correlation, priors=prior,
                config=options.sampler_config(args.seed),
                tail={1: thresholds} if thresholds else None,
            )
            any_flagged |= fit.flagged
            _collect_bayes(method, fit.summary, fit.names, 0,
                           coef_rows, forest_rows, diag_rows, tail_rows,
                           args.dump_draws, fit.draws, outdir, treatment_index=1)

    _write_rows(outdir / "coefficients.csv",
                ["method", "coefficient", "estimate", "se", "lower", "upper"],
                coef_rows)
    _write_rows(outdir / "forest.csv",
                ["method", "estimate", "lower", "upper"], forest_rows)
    if diag_rows:
        _write_rows(outdir / "diagnostics.csv",
                    ["method", "parameter", "rhat", "ess"], diag_rows)
    if tail_rows:
        _write_rows(outdir / "tails.csv",
                    ["method", "threshold", "probability", "mc_se"], tail_rows)
    _write_resolved_config(outdir, args)
    return 3 if any_flagged else 0


def _collect_frequentist(method, fit, treatment_index, coef_rows, forest_rows):
    if fit.converged:
        ci = wald_interval(fit)
    else:
        ci = np.full((fit.beta.size, 2), math.nan)
    for j, name in enumerate(fit.names or tuple(f"b{j}" for j in range(fit.beta.size))):
        coef_rows.append(
            [method, name, _fmt(fit.beta[j]), _fmt(fit.se[j]),
             _fmt(ci[j, 0]), _fmt(ci[j, 1])]
        )
    forest_rows.append(
        [method, _fmt(fit.beta[treatment_index]),
         _fmt(ci[treatment_index, 0]), _fmt(ci[treatment_index, 1])]
    )


def _collect_bayes(method, summary, names, offset, coef_rows, forest_rows,
                   diag_rows, tail_rows, dump_draws, draws, outdir,
                   treatment_index=0):
    for j, name in enumerate(names):
        p = offset + j
        coef_rows.append(
            [method, name, _fmt(summary.mean[p]), _fmt(summary.sd[p]),
             _fmt(summary.lower[p]), _fmt(summary.upper[p])]
        )
    p = offset + treatment_index
    forest_rows.append(
        [method, _fmt(summary.mean[p]), _fmt(summary.lower[p]), _fmt(summary.upper[p])]
    )
    for p in range(summary.rhat.size):
        diag_rows.append([method, p, _fmt(summary.rhat[p]), _fmt(summary.ess[p])])
    for t in summary.tail:
        tail_rows.append(
            [method, _fmt(t.threshold), _fmt(t.probability), _fmt(t.mc_se)]
        )
    if dump_draws:
        draws.write_csv(outdir / f"draws-{method}.csv")


def cmd_simulate(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise UsageError("empty methods list")
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if args.censoring is not None and not (0.0 < args.censoring < 1.0):
        raise UsageError(
            f"censoring must be in (0, 1); paper grid uses {CENSORING_GRID}"
        )
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    has_bayes = any(m in ("pem", "bayes-gmm") for m in methods)
    if args.desk_scale:
        nsim = 50 if has_bayes else 200
    else:
        nsim = args.nsim
    workers = args.threads or int(os.environ.get(THREADS_ENV, "1"))
    options = RunOptions(
        K=args.k, correlation=args.correlation, workers=workers,
        chains=args.chains, iterations=args.iterations,
        warmup=args.warmup, thin=args.thin,
    )

    if args.grid == "table1":
        cells = [
            Scenario(n=n, censoring=0.20, log_hr=-0.3, n_reps=nsim,
                     base_seed=args.seed)
            for n in SAMPLE_SIZES
        ]
        labels = [f"n={s.n}" for s in cells]
    else:
        if args.scenario == "core":
            cell = Scenario(n=500, censoring=0.20, log_hr=-0.3, n_reps=nsim,
                            base_seed=args.seed)
        else:
            cell = Scenario(
                n=args.n,
                censoring=args.censoring if args.censoring is not None else 0.20,
                log_hr=args.log_hr, n_reps=nsim, base_seed=args.seed,
            )
        cells = [cell]
        labels = [f"n={cells[0].n}"]

    all_rows: list[MetricsRow] = []
    row_labels: list[str] = []
    for label, cell in zip(labels, cells):
        rows = run_scenario(cell, methods, options)
        for method in methods:
            all_rows.append(rows[method])
            row_labels.append(label)
        print(format_metrics_table(cell, [rows[m] for m in methods]))
    metrics_to_csv(all_rows, outdir / "metrics.csv", {"cell": row_labels})
    _write_resolved_config(outdir, args)
    return 3 if any(r.flagged for r in all_rows) else 0


CENSORING_GRID = "{5, 10, 20, 30, 70}%"


def format_metrics_table(scenario: Scenario, rows) -> str:
    """Frequentist/Bayesian grouped table of one cell's metrics."""
    freq = [r for r in rows if r.method in ("cox", "gee", "gmm")]
    bayes = [r for r in rows if r.method in ("pem", "bayes-gmm")]
    out = [
        f"n={scenario.n}  censoring={scenario.censoring:.0%}  "
        f"log HR={scenario.log_hr}  reps={scenario.n_reps}",
        f"{'Method':<12}{'Bias':>10}{'ASE':>9}{'RMSE':>9}{'Coverage':>10}",
    ]

    def block(title, items):
        if not items:
            return
        out.append(title)
        for r in items:
            flag = " *" if r.flagged else ""
            out.append(
                f"  {r.method:<10}{r.bias:>10.4f}{r.ase:>9.3f}"
                f"{r.rmse:>9.3f}{100 * r.coverage:>9.1f}%{flag}"
            )

    block("Frequentist", freq)
    block("Bayesian", bayes)
    return "\n".join(out)


def cmd_pseudo(args) -> int:
    data = read_trial_csv(args.input, args.time_col, args.status_col,
                          args.arm_col, ())
    grid = select_time_grid(data, args.k)
    try:
        pom = pseudo_observations(data, grid)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    pom.write_csv(args.output)
    return 0


def _add_common_io(p):
    p.add_argument("--input", required=True, help="trial CSV path")
    p.add_argument("--time-col", default="time")
    p.add_argument("--status-col", default="status")
    p.add_argument("--arm-col", default="arm")
    p.add_argument("--k", type=int, default=5, help="number of grid time points")


def build_parser() -> _Parser:
    parser = _Parser(prog="pseudosurv", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    pa = sub.add_parser("analyze", help="fit all requested methods to a trial CSV")
    _add_common_io(pa)
    pa.add_argument("--covariates", default="", help="comma-separated covariate columns")
    pa.add_argument("--methods", default="cox,gee,gmm,pem,bayes-gmm")
    pa.add_argument("--correlation", default="IND", choices=("IND", "EXCH", "AR1"))
    pa.add_argument("--prior-sd", type=float, default=None,
                    help="Gaussian prior scale (default: 10, or 1 when n <= 100)")
    pa.add_argument("--chains", type=int, default=3)
    pa.add_argument("--iterations", type=int, default=5000)
    pa.add_argument("--warmup", type=int, default=1000)
    pa.add_argument("--thin", type=int, default=5)
    pa.add_argument("--tail", default="",
                    help="comma-separated log-HR thresholds for tail probabilities")
    pa.add_argument("--dump-draws", action="store_true")
    pa.add_argument("--outdir", default="pseudosurv-out")
    pa.add_argument("--seed", type=int, default=0)
    pa.set_defaults(func=cmd_analyze)

    ps = sub.add_parser("simulate", help="run Monte Carlo scenarios")
    ps.add_argument("--scenario", default="", choices=("", "core"),
                    help="named scenario (core: n=500, 20%% censoring, log HR -0.3)")
    ps.add_argument("--grid", default="", choices=("", "table1"),
                    help="predefined scenario grid")
    ps.add_argument("--n", type=int, default=500)
    ps.add_argument("--censoring", type=float, default=None)
    ps.add_argument("--log-hr", type=float, default=-0.3)
    ps.add_argument("--nsim", type=int, default=200)
    ps.add_argument("--desk-scale", action="store_true",
                    help="200 reps frequentist-only cells, 50 with Bayesian methods")
    ps.add_argument("--methods", default="cox,gee,gmm")
    ps.add_argument("--correlation", default="IND", choices=("IND", "EXCH", "AR1"))
    ps.add_argument("--k", type=int, default=5)
    ps.add_argument("--chains", type=int, default=3)
    ps.add_argument("--iterations", type=int, default=2000)
    ps.add_argument("--warmup", type=int, default=500)
    ps.add_argument("--thin", type=int, default=2)
    ps.add_argument("--threads", type=int, default=None,
                    help=f"worker processes (default ${THREADS_ENV} or 1)")
    ps.add_argument("--outdir", default="pseudosurv-sim")
    ps.add_argument("--seed", type=int, default=20240501)
    ps.set_defaults(func=cmd_simulate)

    pp = sub.add_parser("pseudo", help="dump pseudo-observations in long format")
    _add_common_io(pp)
    pp.add_argument("--output", default="pseudo.csv")
    pp.set_defaults(func=cmd_pseudo)
    return parser


def _apply_config_defaults(parser, argv):
    """Pre-parse --config and let file values act as defaults."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise UsageError("--config needs a path")
    path = argv[i + 1]
    rest = argv[:i] + argv[i + 2:]
    config = load_config(path)
    if not rest:
        raise UsageError("--config requires a subcommand")
    command, tail = rest[0], rest[1:]
    injected = []
    for key, value in config.items():
        flag = "--" + key.replace("_", "-")
        if flag in tail:
            continue  # explicit flag wins
        if value.lower() in ("true", "false"):
            if value.lower() == "true":
                injected.append(flag)
        else:
            injected.extend([flag, value])
    return [command] + injected + tail


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_defaults(parser, argv)
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required (analyze, simulate, pseudo)")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
