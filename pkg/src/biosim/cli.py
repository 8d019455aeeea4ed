"""Batch command line: ``biosim <command> [options]``.

Exit status: 0 on success, 1 when the analysis itself fails (non-convergence,
too many failed bootstrap replicates, ...), 2 on usage, schema or config errors.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
import os
import sys
import warnings
from pathlib import Path

from . import __version__
from .dataio import SchemaError, parse_config, parse_dataset
from .fit import (
    EXP_DECAY,
    LOG_LOGISTIC,
    FitError,
    MLEOptions,
    NonparametricFit,
    fit_bernstein_wls,
    fit_parametric_mle,
    select_degree_ks,
)
from .inference import BootstrapError, nonparametric_bootstrap, parametric_bootstrap
from .metric import InsufficientReplicatesError, InvalidSpecError, MetricSpec, lp_metric
from .metric import noninferiority_decision
from .models import CONSTRAINT_MODES, STRICT, ExpDecayParams
from .qp import QPError
from .random_effects import (
    IntegrationError,
    RandomEffectsError,
    REOptions,
    fit_random_coef_mle,
    marginal_theta_expectation,
)
from .report import AnalysisReport, emit_plots
from .simlab import StudyAborted, StudyConfig, run_mc_study

OUTPUT_DIR_ENV = "BIOSIM_OUTPUT_DIR"
BERNSTEIN = "bernstein"
MODELS = (EXP_DECAY, LOG_LOGISTIC, BERNSTEIN)

EXIT_OK, EXIT_ANALYSIS, EXIT_USAGE = 0, 1, 2

ANALYSIS_ERRORS = (
    FitError,
    QPError,
    BootstrapError,
    StudyAborted,
    IntegrationError,
    RandomEffectsError,
    InsufficientReplicatesError,
    ArithmeticError,
)

log = logging.getLogger("biosim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _p_value(text):
    if str(text).lower() in ("inf", "infinity", "sup"):
        return math.inf
    return float(text)


def _positive_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


# config-file keys -> (argparse dest, converter)
CONFIG_KEYS = {
    "p": ("p", _p_value),
    "a": ("a", float),
    "b": ("b", float),
    "margin_d": ("margin", float),
    "margin": ("margin", float),
    "level": ("level", float),
    "alpha_ks": ("alpha_ks", float),
    "ks_threshold": ("alpha_ks", float),
    "bootstrap": ("bootstrap", int),
    "B": ("bootstrap", int),
    "seed": ("seed", int),
    "model": ("model", str),
    "constraint_mode": ("constraint_mode", str),
    "n": ("n", int),
    "reps": ("reps", int),
    "spacing": ("spacing", int),
    "horizon": ("horizon", float),
    "alpha1": ("alpha1", float),
    "beta1": ("beta1", float),
    "alpha2": ("alpha2", float),
    "beta2": ("beta2", float),
    "nodes": ("nodes", int),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value file; flags override it")
    common.add_argument("--out", help=f"report path (default: ${OUTPUT_DIR_ENV} or cwd)")
    common.add_argument("--plots", metavar="DIR", help="write SVG plots to DIR")
    common.add_argument("--quiet", action="store_true", help="do not print the text table")
    common.add_argument("--seed", type=int, default=42)

    data = _Parser(add_help=False)
    data.add_argument("--data", required=True, help="CSV with columns arm,time,responders,n")

    bern = _Parser(add_help=False)
    bern.add_argument("--alpha-ks", dest="alpha_ks", type=float, default=0.2,
                      help="KS p-value threshold for degree selection")
    bern.add_argument("--constraint-mode", choices=CONSTRAINT_MODES, default=STRICT)
    bern.add_argument("--t-max", dest="t_max", type=float,
                      help="right end of the Bernstein window (default: last observed time)")

    metric = _Parser(add_help=False)
    metric.add_argument("--arm1", required=True)
    metric.add_argument("--arm2", required=True)
    metric.add_argument("--model", choices=MODELS, default=EXP_DECAY)
    metric.add_argument("--p", type=_p_value, default=1.0, help="norm order; 'inf' for sup")
    metric.add_argument("--a", type=float, default=5.0)
    metric.add_argument("--b", type=float, default=20.0)
    metric.add_argument("--margin", type=float, help="similarity margin d")
    metric.add_argument("--level", type=float, default=0.95)
    metric.add_argument("--reselect", action="store_true",
                        help="re-run degree selection inside each bootstrap replicate")

    parser = _Parser(prog="biosim", description="Dose-response curve similarity analyses.")
    parser.add_argument("--version", action="version", version=f"biosim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", parents=[common, data, bern], help="fit response curves per arm")
    p.add_argument("--arm", action="append", help="arm to fit (repeatable; default all)")
    p.add_argument("--model", choices=MODELS, default=EXP_DECAY)
    p.add_argument("--degree", type=int, help="fixed Bernstein degree (skips selection)")

    p = sub.add_parser("select-degree", parents=[common, data, bern],
                       help="KS-based Bernstein degree selection")
    p.add_argument("--arm", action="append")

    p = sub.add_parser("metric", parents=[common, data, bern, metric],
                       help="L_p distance between two arms, optionally with bootstrap")
    p.add_argument("--bootstrap", type=_positive_int, default=1000,
                   help="bootstrap replicates B (0 disables)")

    p = sub.add_parser("bootstrap", parents=[common, data, bern, metric],
                       help="bootstrap distribution of the metric")
    p.add_argument("--bootstrap", type=_positive_int, default=1000)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo relative-bias study")
    defaults = StudyConfig()
    p.add_argument("--n", type=int, default=defaults.n)
    p.add_argument("--reps", type=int, default=defaults.reps)
    p.add_argument("--spacing", type=int, choices=(1, 2), default=defaults.spacing)
    p.add_argument("--horizon", type=float, default=defaults.horizon)
    p.add_argument("--alpha-ks", dest="alpha_ks", type=float, default=defaults.ks_threshold)
    p.add_argument("--constraint-mode", choices=CONSTRAINT_MODES, default=STRICT)
    p.add_argument("--p", type=_p_value, default=1.0)
    p.add_argument("--a", type=float, default=5.0)
    p.add_argument("--b", type=float, default=20.0)
    for name, val in (("alpha1", defaults.truth1.alpha), ("beta1", defaults.truth1.beta),
                      ("alpha2", defaults.truth2.alpha), ("beta2", defaults.truth2.beta)):
        p.add_argument(f"--{name}", type=float, default=val)

    p = sub.add_parser("random-effects", parents=[common, data],
                       help="random-coefficient exponential-decay model across studies")
    p.add_argument("--arm", help="arm to analyse (default: the only arm)")
    p.add_argument("--nodes", type=int, default=REOptions.n_nodes,
                   help="Gauss-Hermite nodes per dimension for the likelihood")
    p.add_argument("--times", type=float, nargs="+",
                   help="times at which to report the population mean curve")
    return parser


def _apply_config(parser, argv):
    """Parse once to find ``--config``, turn its keys into defaults, then parse again."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        raw = parse_config(args.config)
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in sub._actions}
    defaults = {}
    for key, text in raw.items():
        if key not in CONFIG_KEYS:
            raise SchemaError(f"unknown config key {key!r}")
        dest, conv = CONFIG_KEYS[key]
        if dest not in dests:
            raise SchemaError(f"config key {key!r} does not apply to {args.command}")
        try:
            defaults[dest] = conv(text)
        except ValueError:
            raise SchemaError(f"bad value {text!r} for config key {key!r}") from None
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _observed(series):
    return {"time": series.t.tolist(), "responders": series.y.tolist(), "n": series.n}


def _pick_arms(dataset, wanted):
    arms = dataset.arms()
    if not wanted:
        return arms
    missing = [a for a in wanted if a not in arms]
    if missing:
        raise SchemaError(f"arm(s) {', '.join(missing)} not in dataset (have {', '.join(arms)})")
    return wanted


def _fit_arm(series, args, report, degree=None):
    """Fit one arm; returns (fit object, result dict)."""
    if args.model in (EXP_DECAY, LOG_LOGISTIC):
        fit = fit_parametric_mle(series, args.model)
        if not fit.converged:
            report.warnings.append(f"{series.arm_id}: multi-start optima disagree")
        return fit, {**fit.as_dict(), "curve": fit.params.as_dict()}
    t_max = args.t_max
    if degree is not None:
        fit = fit_bernstein_wls(series, degree, args.constraint_mode, 0.0, t_max)
        return fit, {**fit.as_dict(), "curve": fit.curve.as_dict()}
    sel = select_degree_ks(series, args.alpha_ks, args.constraint_mode, 0.0, t_max)
    m = sel.chosen_m
    if m is None:
        m = sel.best_by_pvalue()
        report.warnings.append(
            f"{series.arm_id}: no degree reached KS p >= {args.alpha_ks}; using best p-value m={m}"
        )
    fit = sel.fits[m]
    return fit, {**fit.as_dict(), "curve": fit.curve.as_dict(), "selection": sel.as_dict()}


def _cmd_fit(args, report):
    ds = parse_dataset(args.data)
    report.config["data_sha256"] = _file_digest(args.data)
    fits, observed = {}, {}
    for arm in _pick_arms(ds, args.arm):
        s = ds.series(arm)
        observed[arm] = _observed(s)
        fits[arm] = _fit_arm(s, args, report, args.degree)[1]
    report.results.update(fits=fits, observed=observed)


def _cmd_select(args, report):
    ds = parse_dataset(args.data)
    report.config["data_sha256"] = _file_digest(args.data)
    out = {}
    for arm in _pick_arms(ds, args.arm):
        s = ds.series(arm)
        sel = select_degree_ks(s, args.alpha_ks, args.constraint_mode, 0.0, args.t_max)
        entry = sel.as_dict()
        if sel.chosen_m is None:
            report.warnings.append(f"{arm}: no degree reached KS p >= {args.alpha_ks}")
            m = sel.best_by_pvalue()
        else:
            m = sel.chosen_m
        entry["fallback_m"] = m
        entry["curve"] = sel.fits[m].curve.as_dict()
        out[arm] = entry
    report.results["selection"] = out


def _cmd_metric(args, report, require_bootstrap=False):
    B = args.bootstrap
    if require_bootstrap and B == 0:
        raise UsageError("bootstrap needs --bootstrap >= 200")
    if B and B < 200:
        raise UsageError(f"--bootstrap must be 0 or at least 200, got {B}")
    spec = MetricSpec(args.p, args.a, args.b, args.margin)
    ds = parse_dataset(args.data)
    report.config["data_sha256"] = _file_digest(args.data)
    arms = _pick_arms(ds, [args.arm1, args.arm2])
    series = [ds.series(a) for a in arms]
    fitted = [_fit_arm(s, args, report) for s in series]
    fits = [f for f, _ in fitted]
    report.results["fits"] = {a: d for a, (_, d) in zip(arms, fitted)}
    report.results["observed"] = {a: _observed(s) for a, s in zip(arms, series)}
    res = lp_metric(fits[0].curve, fits[1].curve, spec)
    report.results["metric"] = res.as_dict()
    if not B:
        return
    if isinstance(fits[0], NonparametricFit):
        boot = nonparametric_bootstrap(series[0], series[1], tuple(fits), spec, B, args.seed,
                                       args.level, reselect=args.reselect,
                                       alpha_threshold=args.alpha_ks, strict=False)
    else:
        boot = parametric_bootstrap(series[0], series[1], tuple(fits), spec, B, args.seed,
                                    args.level, strict=False)
    if boot.unreliable:
        report.warnings.append(f"{boot.n_failed} of {B} bootstrap replicates failed")
    report.results["bootstrap"] = boot.as_dict(include_replicates=True)
    if boot.failure_reasons:
        report.results["bootstrap"]["failure_sample"] = sorted(set(boot.failure_reasons.values()))[:5]
    if spec.margin_d is not None:
        report.results["noninferiority"] = noninferiority_decision(boot, spec.margin_d)


def _cmd_simulate(args, report):
    config = StudyConfig(
        truth1=ExpDecayParams(args.alpha1, args.beta1),
        truth2=ExpDecayParams(args.alpha2, args.beta2),
        horizon=args.horizon,
        spacing=args.spacing,
        n=args.n,
        reps=args.reps,
        metric_spec=MetricSpec(args.p, args.a, args.b),
        ks_threshold=args.alpha_ks,
        constraint_mode=args.constraint_mode,
        seed=args.seed,
    )
    result = run_mc_study(config)
    report.results["study"] = result.as_dict(include_vectors=True)
    if result.np_fallbacks:
        report.warnings.append(
            f"NP: {result.np_fallbacks} arm fits used the best-p-value degree fallback"
        )


def _cmd_random_effects(args, report):
    ds = parse_dataset(args.data)
    report.config["data_sha256"] = _file_digest(args.data)
    arms = ds.arms()
    if args.arm is None:
        if len(arms) != 1:
            raise UsageError(f"dataset has arms {', '.join(arms)}; choose one with --arm")
        arm = arms[0]
    else:
        arm = _pick_arms(ds, [args.arm])[0]
    studies = ds.studies(arm)
    if len(studies) < 2:
        raise SchemaError("random-effects needs a study_id column with at least 2 studies")
    fit = fit_random_coef_mle(studies, REOptions(n_nodes=args.nodes))
    if not fit.converged:
        report.warnings.append("marginal likelihood optimizer did not report convergence")
    times = args.times or sorted({float(t) for s in studies for t in s.t})
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mean_curve = marginal_theta_expectation(fit.params, times)
    report.warnings.extend(str(w.message) for w in caught)
    report.results["random_effects"] = fit.as_dict()
    report.results["population_mean"] = {"time": list(times), "theta": list(mean_curve)}


COMMANDS = {
    "fit": _cmd_fit,
    "select-degree": _cmd_select,
    "metric": _cmd_metric,
    "bootstrap": lambda a, r: _cmd_metric(a, r, require_bootstrap=True),
    "simulate": _cmd_simulate,
    "random-effects": _cmd_random_effects,
}


def _report_path(args) -> Path:
    if args.out:
        return Path(args.out)
    base = Path(os.environ.get(OUTPUT_DIR_ENV) or ".")
    return base / f"{args.command}_report.json"


def _config_echo(args) -> dict:
    skip = {"out", "plots", "quiet", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def run_command(argv) -> tuple[int, AnalysisReport | None]:
    """Run one CLI invocation; returns ``(exit_status, report)``.

    The report is ``None`` only when the arguments could not be parsed.
    """
    argv = list(argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0), None
    except (UsageError, SchemaError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE, None

    report = AnalysisReport(args.command, argv, _config_echo(args))
    status = EXIT_OK
    try:
        COMMANDS[args.command](args, report)
    except (UsageError, SchemaError, InvalidSpecError, KeyError, OSError) as exc:
        status = EXIT_USAGE
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        report.status, report.error = "usage-error", f"{type(exc).__name__}: {msg}"
    except ANALYSIS_ERRORS as exc:
        status = EXIT_ANALYSIS
        report.status, report.error = "analysis-failed", f"{type(exc).__name__}: {exc}"
    except ValueError as exc:
        # invalid values reaching the library (e.g. n varying inside a study)
        status = EXIT_USAGE
        report.status, report.error = "usage-error", f"{type(exc).__name__}: {exc}"
    if report.error:
        print(report.error, file=sys.stderr)

    try:
        path = report.write(_report_path(args))
    except OSError as exc:
        print(f"cannot write report: {exc}", file=sys.stderr)
        return max(status, EXIT_ANALYSIS), report
    if status == EXIT_OK and args.plots:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            plots = emit_plots(report, args.plots)
        report.warnings.extend(str(w.message) for w in caught)
        report.results["plots"] = [str(p) for p in plots]
        report.write(path)
    if not args.quiet:
        print(report.render_text())
        print(f"report: {path}")
    return status, report


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    status, _ = run_command(sys.argv[1:] if argv is None else argv)
    return status


if __name__ == "__main__":
    sys.exit(main())
