"""Simulation studies and real-data analyses, with their metrics and reports.

Every trial draws its data and its fit seed from ``SeedSequence([seed, ...])``
keyed by the trial coordinates, so a report is a pure function of the
configuration and can be recomputed cell by cell.
"""

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from . import io as mio
from .em import FitConfig, fit
from .exceptions import FitFailedError, UndefinedMomentError, UnsupportedFamilyError
from .model import (
    Dataset,
    Family,
    MoEParams,
    SelectionRow,
    SelectionTable,
    free_params,
    gate_probs,
    map_cluster,
    permute,
    predict_mean,
    predict_variance,
)
from .simulate import SimSpec, simulate, table1_params

NOT_IMPLEMENTED = "not implemented"
_FAMILY_KEY = {Family.NMOE: 0, Family.TMOE: 1, Family.LMOE_SIM: 2}
_FITTABLE = (Family.NMOE, Family.TMOE)


# ---------------------------------------------------------------------------
# metrics


def align_to(true, est):
    """Permute ``est``'s experts to minimize the total squared beta distance to ``true``."""
    if (true.K, true.p) != (est.K, est.p):
        raise ValueError(f"shape mismatch: K,p = {(true.K, true.p)} vs {(est.K, est.p)}")
    best, best_cost = None, math.inf
    for perm in itertools.permutations(range(est.K)):
        cost = float(np.sum((true.beta - est.beta[list(perm)]) ** 2))
        if cost < best_cost:
            best, best_cost = perm, cost
    return permute(est, list(best))


def param_names(params):
    names = [f"alpha{k + 1}{j}" for k in range(params.K - 1) for j in range(params.q)]
    names += [f"beta{k + 1}{j}" for k in range(params.K) for j in range(params.p)]
    if params.sigma2 is not None:
        names += [f"sigma{k + 1}" for k in range(params.K)]
    if params.nu is not None:
        names += [f"nu{k + 1}" for k in range(params.K)]
    if params.lam is not None:
        names += [f"lambda{k + 1}" for k in range(params.K)]
    return names


def param_values(params):
    """Flat name -> value map; scales are reported as sigma, not sigma^2."""
    vals = list(params.alpha.ravel()) + list(params.beta.ravel())
    if params.sigma2 is not None:
        vals += list(np.sqrt(params.sigma2))
    if params.nu is not None:
        vals += list(params.nu)
    if params.lam is not None:
        vals += list(params.lam)
    return dict(zip(param_names(params), (float(v) for v in vals)))


def param_mse(true, est):
    """Squared error per scalar parameter after label alignment.

    Only parameters present in both sets are compared, so a t fit scored
    against normal truth simply has no ``nu`` entries.
    """
    if (true.K, true.p, true.q) != (est.K, est.p, est.q):
        raise ValueError(
            f"shape mismatch: K,p,q = {(true.K, true.p, true.q)} vs {(est.K, est.p, est.q)}"
        )
    est = align_to(true, est)
    tv, ev = param_values(true), param_values(est)
    return {name: (ev[name] - tv[name]) ** 2 for name in tv if name in ev}


def regression_function(params, X, R):
    """Gate-weighted expert lines sum_k pi_k(r) beta_k^T x, whatever the tails."""
    pis = gate_probs(R, params) if params.K > 1 else np.ones((X.shape[0], 1))
    return np.sum(pis * (X @ params.beta.T), axis=1)


def meanfn_mse(true, est, data, require_moments=True):
    """Average squared gap between the true and estimated mean functions.

    With ``require_moments`` (the default) t experts need nu > 1 for the
    mean to exist. Passing False compares the gate-weighted regression
    lines, which coincide with the mean whenever it exists.
    """
    if require_moments:
        gap = predict_mean(data.X, data.R, true) - predict_mean(data.X, data.R, est)
    else:
        gap = regression_function(true, data.X, data.R) - regression_function(est, data.X, data.R)
    return float(np.mean(gap * gap))


# ---------------------------------------------------------------------------
# plumbing


def _seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _pct_key(c):
    return int(round(c * 10000))


def _families(values):
    out = []
    for v in values:
        out.append(Family.parse(v) if str(v).lower() != "lmoe" else Family.LMOE_SIM)
    return tuple(out)


def _fit_label(fam):
    # Laplace experts appear as a fitted model only as a placeholder column
    return "LMoE" if fam is Family.LMOE_SIM else fam.value


def _run_tasks(fn, tasks, n_jobs):
    if n_jobs is None or n_jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, tasks))


def _fit_summary(data, family, K, cfg):
    try:
        res = fit(data, family, K, cfg)
    except FitFailedError as exc:
        return {"ok": False, "error": str(exc), "diagnostics": exc.diagnostics}
    return {
        "ok": True,
        "error": "",
        "params": res.params.to_dict(),
        "loglik": res.loglik,
        "n_iters": res.n_iters,
        "converged": res.converged,
        "nu_saturated": bool(np.any(res.nu_saturated)),
        "collapsed": res.collapsed,
    }


@dataclass
class ExperimentReport:
    """Tables (name -> (header, rows)), per-trial records, and the seeds used."""

    scenario: str
    config: dict
    tables: dict = field(default_factory=dict)
    plots: dict = field(default_factory=dict)
    trials: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)

    def table_dicts(self, name):
        header, rows = self.tables[name]
        return [dict(zip(header, row)) for row in rows]

    def write(self, outdir):
        outdir = Path(outdir)
        for name, (header, rows) in self.tables.items():
            mio.write_csv(outdir / f"{name}.csv", header, rows)
        for name, (header, rows) in self.plots.items():
            mio.write_csv(outdir / f"plot_{name}.csv", header, rows)
        summary = {
            "scenario": self.scenario,
            "config": self.config,
            "seeds": self.seeds,
            "tables": {name: self.table_dicts(name) for name in self.tables},
            "trials": self.trials,
        }
        mio.atomic_write_text(outdir / "summary.json", _json_dump(summary))
        return outdir


def _json_dump(doc):
    import json

    def clean(v):
        if isinstance(v, dict):
            return {str(k): clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, (np.floating, float)):
            v = float(v)
            return None if not math.isfinite(v) else v
        if isinstance(v, (np.integer,)):
            return int(v)
        if isinstance(v, (np.bool_,)):
            return bool(v)
        if isinstance(v, Family):
            return v.value
        return v

    return json.dumps(clean(doc), indent=2) + "\n"


def _config_dict(cfg):
    out = {}
    for k, v in asdict(cfg).items():
        out[k] = v.value if hasattr(v, "value") else v
    if "fit" in out:
        out["fit"] = {k: (v.value if hasattr(v, "value") else v) for k, v in out["fit"].items()}
    return out


PLOT_HEADER = [
    "x", "true_mean", "est_mean", "band_lo", "band_hi", "cluster_label", "est_regression",
]


def plot_rows(data, params, true_params=None):
    """Per-observation curve data sorted by x.

    Mean and +-2 sd band are blank where the fitted t experts lack those
    moments; ``est_regression`` (gate-weighted expert lines) is always set.
    """
    from .em import estep_nmoe, estep_tmoe

    blank = [None] * data.n
    x = data.X[:, 1] if data.p > 1 else np.zeros(data.n)
    line = regression_function(params, data.X, data.R)
    try:
        est = predict_mean(data.X, data.R, params)
    except UndefinedMomentError:
        est = blank
    try:
        sd = np.sqrt(predict_variance(data.X, data.R, params))
        lo, hi = est - 2 * sd, est + 2 * sd
    except UndefinedMomentError:
        lo = hi = blank
    truth = predict_mean(data.X, data.R, true_params) if true_params is not None else blank
    estep = estep_tmoe if params.family is Family.TMOE else estep_nmoe
    labels = map_cluster(estep(data, params).tau)
    order = np.argsort(x, kind="stable")
    return [(x[i], truth[i], est[i], lo[i], hi[i], labels[i], line[i]) for i in order]


# ---------------------------------------------------------------------------
# experiment 1: consistency


@dataclass(frozen=True)
class Exp1Config:
    sizes: Tuple[int, ...] = (50, 100, 200, 500, 1000)
    trials: int = 20
    gen_families: Tuple[str, ...] = ("TMoE",)
    fit_families: Optional[Tuple[str, ...]] = None  # None: fit the generating family
    seed: int = 0
    fit: FitConfig = FitConfig()
    n_jobs: int = 1
    plot_n: int = 500

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.sizes or min(self.sizes) < 1:
            raise ValueError("sizes must be positive")


def _exp1_trial(task):
    gen, fits, n, trial, sim_seed, fit_seed, cfg = task
    truth = table1_params(gen)
    sim = simulate(SimSpec(truth, n, rng_seed=sim_seed))
    out = {"gen": gen.value, "n": n, "trial": trial, "sim_seed": sim_seed, "fit_seed": fit_seed}
    results = {}
    for fam in fits:
        if fam not in _FITTABLE:
            results[fam.value] = {"ok": False, "error": NOT_IMPLEMENTED}
            continue
        summary = _fit_summary(sim.data, fam, truth.K, replace(cfg, rng_seed=fit_seed))
        if summary["ok"]:
            est = MoEParams.from_dict(summary["params"])
            summary["mse"] = param_mse(truth, est)
        results[fam.value] = summary
    out["fits"] = results
    return out


def _exp1_fit_families(cfg, gen):
    if cfg.fit_families is None:
        return (gen if gen in _FITTABLE else Family.TMOE,)
    return _families(cfg.fit_families)


def run_experiment1(cfg=Exp1Config()):
    """Parameter squared errors versus sample size on Table-1-style data."""
    gens = _families(cfg.gen_families)
    tasks = []
    for gen in gens:
        fits = _exp1_fit_families(cfg, gen)
        for n in cfg.sizes:
            for t in range(cfg.trials):
                key = (cfg.seed, 1, _FAMILY_KEY[gen], n, t)
                tasks.append((gen, fits, n, t, _seed(*key, 0), _seed(*key, 1), cfg.fit))
    results = _run_tasks(_exp1_trial, tasks, cfg.n_jobs)

    report = ExperimentReport("exp1", _config_dict(cfg))
    report.trials = results
    report.seeds = [(r["gen"], r["n"], r["trial"], r["sim_seed"], r["fit_seed"]) for r in results]
    for gen in gens:
        for fam in _exp1_fit_families(cfg, gen):
            name = f"table2_{gen.value}-data_{_fit_label(fam)}-fit"
            if fam not in _FITTABLE:
                report.tables[name] = (["n", "status"], [(n, NOT_IMPLEMENTED) for n in cfg.sizes])
                continue
            cols = None
            rows = []
            for n in cfg.sizes:
                cell = [r["fits"][fam.value] for r in results if r["gen"] == gen.value and r["n"] == n]
                ok = [c for c in cell if c["ok"]]
                if cols is None and ok:
                    cols = list(ok[0]["mse"])
                means = {k: float(np.mean([c["mse"][k] for c in ok])) for k in (cols or [])}
                beta = [v for k, v in means.items() if k.startswith("beta")]
                sigma = [v for k, v in means.items() if k.startswith("sigma")]
                rows.append(
                    (n, *[means.get(k, float("nan")) for k in (cols or [])],
                     float(np.mean(beta)) if beta else float("nan"),
                     float(np.mean(sigma)) if sigma else float("nan"),
                     len(ok), len(cell) - len(ok),
                     sum(c.get("nu_saturated", False) for c in ok))
                )
            header = ["n", *(cols or []), "mean_beta", "mean_sigma", "trials_ok", "trials_failed", "nu_saturated"]
            report.tables[name] = (header, rows)

            if cfg.plot_n in cfg.sizes:
                first = next(
                    r for r in results
                    if r["gen"] == gen.value and r["n"] == cfg.plot_n and r["trial"] == 0
                )
                summary = first["fits"][fam.value]
                if summary["ok"]:
                    truth = table1_params(gen)
                    data = simulate(SimSpec(truth, cfg.plot_n, rng_seed=first["sim_seed"])).data
                    est = MoEParams.from_dict(summary["params"])
                    report.plots[f"exp1_{gen.value}-data_{fam.value}-fit_n{cfg.plot_n}"] = (
                        PLOT_HEADER,
                        plot_rows(data, est, truth),
                    )
    return report


# ---------------------------------------------------------------------------
# experiment 2: robustness to outliers


@dataclass(frozen=True)
class Exp2Config:
    probs: Tuple[float, ...] = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05)
    n: int = 500
    trials: int = 20
    gen_families: Tuple[str, ...] = ("NMoE", "LMoE-sim", "TMoE")
    fit_families: Tuple[str, ...] = ("NMoE", "LMoE", "TMoE")
    seed: int = 0
    fit: FitConfig = FitConfig()
    n_jobs: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if any(not 0.0 <= c <= 1.0 for c in self.probs):
            raise ValueError("outlier probabilities must lie in [0, 1]")


def _exp2_trial(task):
    gen, fits, n, c, trial, sim_seed, fit_seed, cfg = task
    truth = table1_params(gen)
    sim = simulate(SimSpec(truth, n, outlier_prob=c, rng_seed=sim_seed))
    out = {
        "gen": gen.value, "c": c, "trial": trial, "sim_seed": sim_seed, "fit_seed": fit_seed,
        "n_outliers": int(sim.outlier_mask.sum()),
    }
    results = {}
    for fam in fits:
        if fam not in _FITTABLE:
            results[fam.value] = {"ok": False, "error": NOT_IMPLEMENTED}
            continue
        summary = _fit_summary(sim.data, fam, truth.K, replace(cfg, rng_seed=fit_seed))
        if summary["ok"]:
            est = MoEParams.from_dict(summary["params"])
            summary["meanfn_mse"] = meanfn_mse(truth, est, sim.data, require_moments=False)
            summary["mean_defined"] = est.nu is None or bool(np.all(est.nu > 1.0))
        results[fam.value] = summary
    out["fits"] = results
    return out


def run_experiment2(cfg=Exp2Config()):
    """Mean-function error versus outlier probability for each generator/fit pair."""
    gens = _families(cfg.gen_families)
    fits = _families(cfg.fit_families)
    tasks = []
    for gen in gens:
        for c in cfg.probs:
            for t in range(cfg.trials):
                key = (cfg.seed, 2, _FAMILY_KEY[gen], _pct_key(c), cfg.n, t)
                tasks.append((gen, fits, cfg.n, c, t, _seed(*key, 0), _seed(*key, 1), cfg.fit))
    results = _run_tasks(_exp2_trial, tasks, cfg.n_jobs)

    report = ExperimentReport("exp2", _config_dict(cfg))
    report.trials = results
    report.seeds = [(r["gen"], r["c"], r["trial"], r["sim_seed"], r["fit_seed"]) for r in results]
    header = ["generator", "model", *[f"c={100 * c:g}%" for c in cfg.probs]]

    def cell_values(gen, fam, c, key):
        return [
            r["fits"][fam.value][key]
            for r in results
            if r["gen"] == gen.value and r["c"] == c and r["fits"][fam.value]["ok"]
        ]

    aggregates = {
        "table3": lambda v: float(np.mean(v)) if v else float("nan"),
        "table3_median": lambda v: float(np.median(v)) if v else float("nan"),
    }
    for name, agg in aggregates.items():
        rows = []
        for gen in gens:
            for fam in fits:
                row = [gen.value, _fit_label(fam)]
                for c in cfg.probs:
                    if fam not in _FITTABLE:
                        row.append(NOT_IMPLEMENTED)
                    else:
                        row.append(agg(cell_values(gen, fam, c, "meanfn_mse")))
                rows.append(tuple(row))
        report.tables[name] = (header, rows)
    # trials whose fitted t experts have no mean (nu <= 1); their error is
    # measured on the gate-weighted regression lines
    rows = []
    for gen in gens:
        for fam in fits:
            if fam in _FITTABLE:
                rows.append((gen.value, fam.value, *[
                    sum(not d for d in cell_values(gen, fam, c, "mean_defined")) for c in cfg.probs
                ]))
    report.tables["table3_undefined_mean"] = (header, rows)

    c_plot = max(cfg.probs)
    for gen in gens:
        first = next(r for r in results if r["gen"] == gen.value and r["c"] == c_plot and r["trial"] == 0)
        truth = table1_params(gen)
        data = simulate(SimSpec(truth, cfg.n, outlier_prob=c_plot, rng_seed=first["sim_seed"])).data
        for fam in fits:
            summary = first["fits"][fam.value]
            if fam in _FITTABLE and summary["ok"]:
                est = MoEParams.from_dict(summary["params"])
                name = f"exp2_{gen.value}-data_{fam.value}-fit_c{100 * c_plot:g}"
                report.plots[name] = (PLOT_HEADER, plot_rows(data, est, truth))
    return report


# ---------------------------------------------------------------------------
# model selection and real data


def selection_sweep(data, family, k_values, fit_cfg=FitConfig()):
    """Fit every K and tabulate log-likelihoods and criteria; failures stay in-row."""
    family = Family.parse(family)
    table = SelectionTable(family, data.n)
    fits = {}
    for K in k_values:
        eta = free_params(family, K, data.p, data.q)
        try:
            res = fit(data, family, K, fit_cfg)
        except (FitFailedError, UnsupportedFamilyError) as exc:
            table.add(SelectionRow(K, n_free_params=eta, error=str(exc)))
            continue
        fits[K] = res
        table.add(
            SelectionRow(
                K,
                loglik=res.loglik,
                complete_loglik=res.complete_loglik,
                n_free_params=eta,
                bic=res.criteria["bic"],
                aic=res.criteria["aic"],
                icl=res.criteria["icl"],
            )
        )
    return table, fits


SELECTION_HEADER = [
    "K", "loglik", "complete_loglik", "n_free_params", "bic", "aic", "icl",
    "best_bic", "best_aic", "best_icl", "error",
]


def selection_rows(table):
    best = {c: table.best(c) for c in ("bic", "aic", "icl")}
    rows = []
    for K in sorted(table.rows):
        r = table.rows[K]
        rows.append((
            K, r.loglik, r.complete_loglik, r.n_free_params, r.bic, r.aic, r.icl,
            best["bic"] == K, best["aic"] == K, best["icl"] == K, r.error,
        ))
    return rows


@dataclass(frozen=True)
class RealStudyConfig:
    k: int = 2
    k_values: Tuple[int, ...] = (1, 2, 3, 4, 5)
    families: Tuple[str, ...] = ("NMoE", "TMoE")
    fit: FitConfig = FitConfig()
    outlier_point: Tuple[float, float] = (0.0, 4.0)
    n_outliers: int = 10


def with_outliers(data, point=(0.0, 4.0), count=10):
    """Append ``count`` copies of the (x, y) pair ``point``."""
    x = np.full(count, float(point[0]))
    extra = Dataset.from_covariates(x, np.full(count, float(point[1])))
    if extra.p != data.p or extra.q != data.q:
        raise ValueError("outlier rows need a scalar-covariate dataset")
    return data.append(extra)


def _params_table(fits):
    names = []
    for res in fits.values():
        for n in param_names(res.params):
            if n not in names:
                names.append(n)
    header = ["model", *names, "loglik"]
    rows = []
    for fam, res in fits.items():
        vals = param_values(res.params)
        rows.append((fam, *[vals.get(n) for n in names], res.loglik))
    return header, rows


def run_real_study(name, cfg=RealStudyConfig(), data=None):
    """Tone or temperature analysis: K-expert fits, criteria sweep, partitions, curves.

    ``data`` defaults to the bundled file for ``name``. The tone study is
    repeated after appending ten (0, 4) outliers.
    """
    if data is None:
        data = mio.load_bundled(name)
    families = _families(cfg.families)
    report = ExperimentReport(name, {**_config_dict(cfg), "dataset": name, "n": data.n})
    report.seeds = [cfg.fit.rng_seed]
    variants = {"clean": data}
    if name == "tone":
        variants["outliers"] = with_outliers(data, cfg.outlier_point, cfg.n_outliers)

    for variant, d in variants.items():
        fits = {}
        for fam in families:
            if fam not in _FITTABLE:
                continue
            res = fit(d, fam, cfg.k, cfg.fit)
            fits[fam.value] = res
            report.fits[(variant, fam.value)] = res
            report.plots[f"{name}_{variant}_{fam.value}"] = (PLOT_HEADER, plot_rows(d, res.params))
            report.tables[f"trace_{variant}_{fam.value}"] = (
                ["iteration", "loglik"], list(enumerate(res.loglik_trace)),
            )
        report.tables[f"params_{variant}"] = _params_table(fits)
        labels = {f: map_cluster(r.estep_final.tau) for f, r in fits.items()}
        x = d.X[:, 1]
        report.tables[f"clusters_{variant}"] = (
            ["x", "y", *[f"label_{f}" for f in labels]],
            [(x[i], d.y[i], *[lab[i] for lab in labels.values()]) for i in range(d.n)],
        )

    for fam in families:
        if fam not in _FITTABLE:
            continue
        table, _ = selection_sweep(data, fam, cfg.k_values, cfg.fit)
        report.tables[f"selection_{fam.value}"] = (SELECTION_HEADER, selection_rows(table))
    return report
