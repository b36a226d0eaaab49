"""``moe-robust`` command line: fit, select, predict, cluster, simulate, experiment.

Exit codes: 0 success, 1 usage or I/O error, 2 fit did not converge (its
outputs are still written).
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as mio
from .em import FitConfig, estep_nmoe, estep_tmoe, fit
from .exceptions import (
    ChecksumError,
    CsvFormatError,
    DomainError,
    FitFailedError,
    UndefinedMomentError,
    UnsupportedFamilyError,
)
from .experiments import (
    SELECTION_HEADER,
    Exp1Config,
    Exp2Config,
    RealStudyConfig,
    run_experiment1,
    run_experiment2,
    run_real_study,
    selection_rows,
    selection_sweep,
)
from .model import Family, MoEParams, map_cluster, predict_mean, predict_variance
from .simulate import PRESETS, SimSpec, simulate

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

log = logging.getLogger("moe_robust")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _family_arg(value):
    try:
        return Family.parse("LMoE-sim" if value.lower() == "lmoe" else value)
    except UnsupportedFamilyError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_int(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def _float_list(value):
    return tuple(float(v) for v in value.split(",") if v.strip())


def _int_list(value):
    return tuple(int(v) for v in value.split(",") if v.strip())


def _add_fit_flags(p):
    d = FitConfig()
    g = p.add_argument_group("fitting")
    g.add_argument("--max-em-iters", type=int, default=d.max_em_iters)
    g.add_argument("--tol", type=float, default=d.tol, help="relative log-likelihood change")
    g.add_argument("--n-restarts", type=_positive_int, default=d.n_restarts)
    g.add_argument("--algorithm", choices=["EM", "ECM"], default=d.algorithm.value)
    g.add_argument(
        "--sigma-update", choices=["standard", "modified_divisor"], default=d.sigma_update.value
    )
    g.add_argument("--irls-max-iters", type=int, default=d.irls_max_iters)
    g.add_argument("--irls-tol", type=float, default=d.irls_tol)
    g.add_argument("--nu-lo", type=float, default=d.nu_bracket[0])
    g.add_argument("--nu-hi", type=float, default=d.nu_bracket[1])
    g.add_argument("--nu-init-lo", type=float, default=d.nu_init_range[0])
    g.add_argument("--nu-init-hi", type=float, default=d.nu_init_range[1])
    g.add_argument("--min-sigma2", type=float, default=d.min_sigma2)
    g.add_argument("--seed", type=int, default=0, help="source of all randomness")


def _fit_config(args):
    return FitConfig(
        max_em_iters=args.max_em_iters,
        tol=args.tol,
        n_restarts=args.n_restarts,
        algorithm=args.algorithm,
        sigma_update=args.sigma_update,
        irls_max_iters=args.irls_max_iters,
        irls_tol=args.irls_tol,
        nu_bracket=(args.nu_lo, args.nu_hi),
        nu_init_range=(args.nu_init_lo, args.nu_init_hi),
        min_sigma2=args.min_sigma2,
        rng_seed=args.seed,
    )


def _read_params(path):
    try:
        return MoEParams.from_json(Path(path).read_text(encoding="utf-8"))
    except (KeyError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: not a parameter document ({exc})") from None


def _estep(data, params):
    return (estep_tmoe if params.family is Family.TMOE else estep_nmoe)(data, params)


# ---------------------------------------------------------------------------
# subcommands


def cmd_fit(args):
    cfg = _fit_config(args)
    data = mio.read_dataset(args.input)
    res = fit(data, args.family, args.k, cfg)
    out = Path(args.out)
    mio.atomic_write_text(out / "params.json", res.params.to_json() + "\n")
    mio.write_csv(out / "loglik_trace.csv", ["iteration", "loglik"], enumerate(res.loglik_trace))
    K = res.params.K
    tau = res.estep_final.tau
    mio.write_csv(out / "responsibilities.csv", [f"tau_{k + 1}" for k in range(K)], tau)
    labels = map_cluster(tau)
    mio.write_csv(
        out / "clusters.csv", ["x", "y", "label"], zip(data.X[:, 1], data.y, labels)
    )
    report = {
        "family": res.params.family.value,
        "K": K,
        "n": data.n,
        "loglik": res.loglik,
        "complete_loglik": res.complete_loglik,
        "n_free_params": res.n_free_params,
        "criteria": res.criteria,
        "n_iters": res.n_iters,
        "converged": res.converged,
        "best_restart": res.best_restart,
        "restart_logliks": res.restart_logliks,
        "nu_saturated": [bool(v) for v in res.nu_saturated],
        "collapsed": res.collapsed,
        "diagnostics": res.diagnostics,
    }
    mio.write_json(out / "fit_report.json", report)
    if not res.converged:
        print(f"warning: no convergence within {cfg.max_em_iters} iterations", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_select(args):
    if args.k_min > args.k_max:
        raise UsageError("--k-min must not exceed --k-max")
    cfg = _fit_config(args)
    data = mio.read_dataset(args.input)
    table, _ = selection_sweep(data, args.family, range(args.k_min, args.k_max + 1), cfg)
    mio.write_csv(args.out, SELECTION_HEADER, selection_rows(table))
    return EXIT_OK


def cmd_predict(args):
    params = _read_params(args.params)
    X, R = mio.read_covariates(args.input)
    if X.shape[1] != params.p or (params.K > 1 and R.shape[1] != params.q):
        raise ValueError(
            f"covariates give p={X.shape[1]}, q={R.shape[1]}; parameters need p={params.p}, q={params.q}"
        )
    n = X.shape[0]
    blank = [None] * n
    flag = ""
    try:
        mean = predict_mean(X, R, params)
    except UndefinedMomentError:
        mean, flag = blank, "mean_undefined"
    try:
        var = predict_variance(X, R, params) if not flag else blank
    except UndefinedMomentError:
        var, flag = blank, "variance_undefined"
    if var is blank:
        lo = hi = blank
    else:
        sd = np.sqrt(var)
        lo, hi = mean - 2.0 * sd, mean + 2.0 * sd
    header = ["x", "r", "mean", "variance", "band_lo", "band_hi", "flag"]
    rows = [(X[i, 1], R[i, 1], mean[i], var[i], lo[i], hi[i], flag) for i in range(n)]
    mio.write_csv(args.out, header, rows)
    return EXIT_OK


def cmd_cluster(args):
    params = _read_params(args.params)
    data = mio.read_dataset(args.input)
    tau = _estep(data, params).tau
    labels = map_cluster(tau)
    header = ["x", "y", "label", *[f"tau_{k + 1}" for k in range(params.K)]]
    mio.write_csv(
        args.out, header, [(data.X[i, 1], data.y[i], labels[i], *tau[i]) for i in range(data.n)]
    )
    return EXIT_OK


def cmd_simulate(args):
    if (args.preset is None) == (args.params is None):
        raise UsageError("give exactly one of --preset or --params")
    params = PRESETS[args.preset]() if args.preset else _read_params(args.params)
    spec = SimSpec(
        params,
        args.n,
        x_range=(args.x_min, args.x_max),
        outlier_prob=args.outlier_prob,
        outlier_y=args.outlier_y,
        rng_seed=args.seed,
    )
    sim = simulate(spec)
    out = Path(args.out)
    mio.write_dataset(
        out, sim.x, sim.data.y, extra={"label": sim.labels, "outlier": sim.outlier_mask}
    )
    sidecar = {
        "preset": args.preset,
        "n": args.n,
        "x_range": list(spec.x_range),
        "outlier_prob": spec.outlier_prob,
        "outlier_y": spec.outlier_y,
        "seed": args.seed,
        "params": params.to_dict(),
    }
    mio.write_json(out.with_suffix(out.suffix + ".json"), sidecar)
    return EXIT_OK


def cmd_experiment(args):
    fit_cfg = _fit_config(args)
    extra = {} if args.n_jobs is None else {"n_jobs": args.n_jobs}
    if args.name == "exp1":
        kw = dict(seed=args.seed, fit=fit_cfg, **extra)
        if args.trials:
            kw["trials"] = args.trials
        if args.sizes:
            kw["sizes"] = args.sizes
        report = run_experiment1(Exp1Config(**kw))
    elif args.name == "exp2":
        kw = dict(seed=args.seed, fit=fit_cfg, **extra)
        if args.trials:
            kw["trials"] = args.trials
        if args.probs:
            kw["probs"] = args.probs
        report = run_experiment2(Exp2Config(**kw))
    else:
        report = run_real_study(args.name, RealStudyConfig(fit=fit_cfg))
    report.write(args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="moe-robust", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("fit", help="fit a model to x,y[,r] data")
    s.add_argument("input")
    s.add_argument("--family", type=_family_arg, required=True, help="nmoe or tmoe")
    s.add_argument("--k", type=_positive_int, required=True)
    s.add_argument("--out", default="fit_out", help="output directory")
    _add_fit_flags(s)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("select", help="criteria sweep over K")
    s.add_argument("input")
    s.add_argument("--family", type=_family_arg, required=True)
    s.add_argument("--k-min", type=_positive_int, default=1)
    s.add_argument("--k-max", type=_positive_int, default=5)
    s.add_argument("--out", default="selection.csv")
    _add_fit_flags(s)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("predict", help="predictive mean, variance and +-2 sd band")
    s.add_argument("input", help="CSV with column x and optional r")
    s.add_argument("--params", required=True)
    s.add_argument("--out", default="predictions.csv")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("cluster", help="MAP labels under fitted parameters")
    s.add_argument("input")
    s.add_argument("--params", required=True)
    s.add_argument("--out", default="clusters.csv")
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("simulate", help="draw a dataset")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--params", help="parameter JSON instead of a preset")
    s.add_argument("--n", type=_positive_int, required=True)
    s.add_argument("--outlier-prob", type=float, default=0.0)
    s.add_argument("--outlier-y", type=float, default=-2.0)
    s.add_argument("--x-min", type=float, default=-1.0)
    s.add_argument("--x-max", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="simulated.csv")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("experiment", help="reproduce a simulation study or data analysis")
    s.add_argument("name", choices=["exp1", "exp2", "tone", "temperature"])
    s.add_argument("--out", default=None, help="report directory (default: report_<name>)")
    s.add_argument("--trials", type=_positive_int)
    s.add_argument("--sizes", type=_int_list, help="exp1 sample sizes, comma separated")
    s.add_argument("--probs", type=_float_list, help="exp2 outlier probabilities")
    s.add_argument("--n-jobs", type=_positive_int, help="worker processes for trials")
    _add_fit_flags(s)
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        if getattr(args, "family", None) is Family.LMOE_SIM and args.command in ("fit", "select"):
            raise UnsupportedFamilyError("fitting LMoE is not implemented (simulation only)")
        if args.command == "experiment" and args.out is None:
            args.out = f"report_{args.name}"
        if hasattr(args, "max_em_iters"):
            _fit_config(args)  # validate every flag before any work starts
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except FitFailedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for line in exc.diagnostics:
            print(f"  {line}", file=sys.stderr)
        return EXIT_ERROR
    except (
        CsvFormatError,
        ChecksumError,
        DomainError,
        UndefinedMomentError,
        UnsupportedFamilyError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
