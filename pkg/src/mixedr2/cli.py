"""Command-line front end: ``fit``, ``table``, ``simulate``, ``distance``, ``residualize``.

Exit status is 0 on success, 2 on usage errors and 1 when a computation fails.
Output files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile

from . import report as rpt
from .design import DataError, FormulaError, load_csv, parse_formula, residualize
from .sim import STUDIES, beta_grid, default_config, run_study
from .varfun import DomainError, QuadratureError, arc_length_result, get_family

FAMILIES = ["gaussian", "binomial", "poisson", "gamma", "inverse-gaussian"]


class UsageError(Exception):
    pass


def _grid(text):
    try:
        start, stop, step = (float(t) for t in text.split(":"))
        return beta_grid(start, stop, step)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected start:stop:step, got {text!r} ({exc})")


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_model_options(p):
    p.add_argument("--data", required=True, help="input CSV with a header row")
    p.add_argument("--family", default="gaussian", choices=FAMILIES,
                   help="response family (default: gaussian)")
    p.add_argument("--link", default=None, help="link function (default: canonical)")
    p.add_argument("--categorical", type=_csv_list, default=[], metavar="COLS",
                   help="comma-separated columns forced to be categorical")
    p.add_argument("--reml", action="store_true", help="fit gaussian models by REML")
    p.add_argument("--agq-nodes", type=int, default=15, metavar="K",
                   help="adaptive Gauss-Hermite nodes for GLMMs, odd, 1 = Laplace (default: 15)")
    p.add_argument("--benchmark", action="store_true",
                   help="also refit with the grouping factor as fixed effects (R2_V, R2_KL)")
    p.add_argument("--output", "-o", default=None, help="output path (default: stdout)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mixedr2", description="Coefficients of determination for random-intercept "
                                    "linear and generalized linear mixed models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one model and report its R^2 panel")
    _add_model_options(p)
    p.add_argument("--formula", required=True,
                   help='model formula, e.g. "y ~ x + (1|g) + offset(log(n))"')
    p.add_argument("--format", default="json", choices=["json", "tsv", "md"])

    p = sub.add_parser("table", help="compare several models in one table")
    _add_model_options(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--formula", action="append", dest="formulas",
                     help="model formula; repeat for each model")
    src.add_argument("--models-file", help="file with one formula per line, "
                                          "optionally 'label<TAB>formula'")
    p.add_argument("--format", default="md", choices=["md", "tsv", "json"])

    p = sub.add_parser("simulate", help="run a Monte-Carlo study and write median summaries")
    p.add_argument("--study", required=True, choices=STUDIES)
    p.add_argument("--m", type=int, default=None, help="number of groups (default: 50)")
    p.add_argument("--n-obs", type=int, default=None,
                   help="observations per data set (default: 200 lmm, 400 otherwise)")
    p.add_argument("--reps", type=int, default=200, help="replicates per beta (default: 200)")
    p.add_argument("--full", action="store_true", help="use 1000 replicates")
    p.add_argument("--beta-grid", type=_grid, default=beta_grid(0.0, 2.0, 0.25),
                   metavar="START:STOP:STEP", help="inclusive beta grid (default: 0:2:0.25)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--random-sd", type=float, default=None,
                   help="sd of the group effects (default: 1, or 0.5 for loglinear)")
    p.add_argument("--negbin-size", type=float, default=1.0,
                   help="negative-binomial size r (default: 1)")
    p.add_argument("--models", type=_csv_list, default=["x1", "x2"],
                   help="models to fit: x1, x2 or x1,x2 (default)")
    p.add_argument("--reml", action="store_true")
    p.add_argument("--agq-nodes", type=int, default=15, metavar="K")
    p.add_argument("--no-benchmark", action="store_true",
                   help="skip the fixed-group GLM benchmarks in GLMM studies")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker processes (default: available CPUs)")
    p.add_argument("--output", "-o", default=None)
    p.add_argument("--format", default="csv", choices=["csv"])

    p = sub.add_parser("distance", help="variance-function distance d_V(y, mu)")
    p.add_argument("--family", required=True, choices=FAMILIES)
    p.add_argument("--y", type=float, required=True)
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--mu0", type=float, default=None,
                   help="print d_V(y, mu) / d_V(y, mu0) instead")
    p.add_argument("--format", default="text", choices=["text", "json"])
    p.add_argument("--output", "-o", default=None)

    p = sub.add_parser("residualize",
                       help="add the residual of a column regressed on another column")
    p.add_argument("--data", required=True)
    p.add_argument("--column", required=True)
    p.add_argument("--on", required=True, help="factor (or numeric column) to regress on")
    p.add_argument("--name", default=None, help="new column name (default: <column>_r)")
    p.add_argument("--categorical", type=_csv_list, default=[], metavar="COLS")
    p.add_argument("--output", "-o", default=None)
    return parser


def _write(path, text):
    if path is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _options(args):
    if args.agq_nodes < 1 or args.agq_nodes > 50 or args.agq_nodes % 2 == 0:
        raise UsageError("--agq-nodes must be odd and between 1 and 50")
    return rpt.AnalysisOptions(method="REML" if args.reml else "ML", nodes=args.agq_nodes,
                               benchmark=args.benchmark)


def _load(args):
    hints = {c: "categorical" for c in args.categorical}
    return load_csv(args.data, hints)


def _read_models(path, family, link):
    specs, labels = [], []
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read models file: {exc}")
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        label, _, formula = line.rpartition("\t")
        spec = parse_formula(formula, family, link)
        specs.append(spec)
        labels.append(label.strip() or spec.to_formula())
    if not specs:
        raise UsageError("models file contains no formulas")
    return specs, labels


def _render(obj, fmt):
    if fmt == "json":
        return rpt.to_json(obj)
    if fmt == "tsv":
        return rpt.to_tsv(obj)
    return rpt.to_markdown(obj)


def cmd_fit(args):
    opts = _options(args)
    spec = parse_formula(args.formula, args.family, args.link)
    data = _load(args)
    report = rpt.analyze_model(data, spec, opts)
    _write(args.output, _render(report, args.format))


def cmd_table(args):
    opts = _options(args)
    if args.models_file:
        specs, labels = _read_models(args.models_file, args.family, args.link)
    else:
        specs = [parse_formula(f, args.family, args.link) for f in args.formulas]
        labels = [s.to_formula() for s in specs]
    data = _load(args)
    table = rpt.compare_models(data, specs, opts, labels)
    _write(args.output, _render(table, args.format))
    if not any(r.ok for r in table.rows):
        raise RuntimeError("every model failed")


def cmd_simulate(args):
    if args.threads < 1:
        raise UsageError("--threads must be positive")
    if args.reps < 1:
        raise UsageError("--reps must be positive")
    overrides = dict(beta_grid=args.beta_grid, replicates=1000 if args.full else args.reps,
                     seed=args.seed, nb_size=args.negbin_size, models=tuple(args.models),
                     method="REML" if args.reml else "ML", nodes=args.agq_nodes,
                     benchmarks=not args.no_benchmark)
    if args.m is not None:
        overrides["m"] = args.m
    if args.n_obs is not None:
        overrides["n_obs"] = args.n_obs
    if args.random_sd is not None:
        overrides["random_sd"] = args.random_sd
    try:
        config = default_config(args.study, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc))
    result = run_study(config, workers=args.threads)
    _write(args.output, result.to_csv())
    if result.flagged:
        sys.stderr.write("warning: more than 5% of fits failed at some grid point\n")


def cmd_distance(args):
    family = get_family(args.family)
    num = arc_length_result(family, args.y, args.mu)
    if args.mu0 is None:
        value, what = num.d_v, "d_v"
    else:
        den = arc_length_result(family, args.y, args.mu0)
        if den.d_v == 0:
            raise ZeroDivisionError("d_V(y, mu0) is zero")
        value, what = num.d_v / den.d_v, "ratio"
    if args.format == "json":
        text = json.dumps({"family": family.name, "y": args.y, "mu": args.mu,
                           "mu0": args.mu0, what: float(format(value, ".10g")),
                           "method": num.method}) + "\n"
    else:
        text = format(value, ".10g") + "\n"
    _write(args.output, text)


def cmd_residualize(args):
    data = _load(args)
    for col in (args.column, args.on):
        if col not in data:
            raise UsageError(f"unknown column {col!r}")
    out = residualize(data, args.column, args.on, args.name)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(out.names)
    cols = [out[c].labels() if out.is_categorical(c) else [repr(float(v)) for v in out[c]]
            for c in out.names]
    w.writerows(zip(*cols))
    _write(args.output, buf.getvalue())


COMMANDS = {"fit": cmd_fit, "table": cmd_table, "simulate": cmd_simulate,
            "distance": cmd_distance, "residualize": cmd_residualize}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except (UsageError, FormulaError) as exc:
        sys.stderr.write(f"mixedr2 {args.command}: usage error: {exc}\n")
        return 2
    except (DataError, DomainError, QuadratureError, rpt.ModelFailure, RuntimeError,
            ValueError, ArithmeticError, OSError) as exc:
        sys.stderr.write(f"mixedr2 {args.command}: error: {exc}\n")
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
