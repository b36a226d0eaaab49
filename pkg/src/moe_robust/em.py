"""Maximum-likelihood fitting of normal and t mixtures of experts.

One EM iteration is: E-step, Newton (IRLS) update of the gating weights,
weighted least squares for the experts, then (t experts only) a scalar root
solve for each expert's degrees of freedom. The ECM variant recomputes the
E-step quantities between the expert update and the dof solve.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from .densities import _log_minus_digamma
from .exceptions import DegenerateComponentError, FitFailedError, UnsupportedFamilyError
from .kernels import FAMILY_NORMAL, FAMILY_T, estep_arrays, q1_derivatives, q1_value
from .model import (
    Family,
    GatingParams,
    MoEParams,
    canonical_order_index,
    complete_loglik,
    criteria,
    free_params,
    permute,
)

log = logging.getLogger(__name__)

_RIDGE_GATING = 1e-8
_RIDGE_WLS = 1e-10
_MAX_HALVINGS = 30
_DEGENERATE_MASS = 1e-6
_EPS_GAIN = 8 * np.finfo(float).eps


class Algorithm(str, Enum):
    EM = "EM"
    ECM = "ECM"


class SigmaUpdate(str, Enum):
    STANDARD = "standard"
    MODIFIED = "modified_divisor"


@dataclass(frozen=True)
class FitConfig:
    max_em_iters: int = 1500
    tol: float = 1e-6
    n_restarts: int = 10
    algorithm: Algorithm = Algorithm.EM
    sigma_update: SigmaUpdate = SigmaUpdate.STANDARD
    irls_max_iters: int = 50
    irls_tol: float = 1e-8
    nu_bracket: Tuple[float, float] = (0.1, 200.0)
    nu_init_range: Tuple[float, float] = (1.0, 200.0)
    min_sigma2: float = 1e-10
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        object.__setattr__(self, "sigma_update", SigmaUpdate(self.sigma_update))
        object.__setattr__(self, "nu_bracket", tuple(float(v) for v in self.nu_bracket))
        object.__setattr__(self, "nu_init_range", tuple(float(v) for v in self.nu_init_range))
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if self.max_em_iters < 0 or self.irls_max_iters < 0:
            raise ValueError("iteration caps must be non-negative")
        if not self.irls_tol > 0 or not self.min_sigma2 > 0:
            raise ValueError("irls_tol and min_sigma2 must be positive")
        for name in ("nu_bracket", "nu_init_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo < hi and math.isfinite(hi)):
                raise ValueError(f"{name} must satisfy 0 < lo < hi, got {(lo, hi)}")


@dataclass
class EStepQuantities:
    tau: np.ndarray
    w: Optional[np.ndarray]
    e1: Optional[np.ndarray]
    loglik: float

    def permuted(self, order):
        pick = lambda a: None if a is None else a[:, order]
        return EStepQuantities(self.tau[:, order], pick(self.w), pick(self.e1), self.loglik)


@dataclass
class IrlsResult:
    alpha: np.ndarray
    q1: float
    n_iters: int
    converged: bool
    failed: bool = False


@dataclass
class DofSolution:
    nu: float
    residual: float
    saturated: bool


@dataclass
class RunResult:
    """Outcome of a single EM run from one initialization."""

    params: MoEParams
    loglik_trace: np.ndarray
    n_iters: int
    converged: bool
    estep_final: EStepQuantities
    nu_saturated: np.ndarray
    irls_failures: int = 0
    collapsed: bool = False


@dataclass
class FitResult:
    params: MoEParams
    loglik_trace: np.ndarray
    n_iters: int
    converged: bool
    estep_final: EStepQuantities
    criteria: dict
    loglik: float
    complete_loglik: float
    n_free_params: int
    nu_saturated: np.ndarray
    best_restart: int
    collapsed: bool
    restart_logliks: List[float] = field(default_factory=list)
    diagnostics: List[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# E-step


def _estep(data, params, family_code):
    tau, w, e1, total, _ = estep_arrays(
        data.y, data.X, data.R, params.alpha, params.beta, params.sigma2, params.nu, family_code
    )
    if family_code == FAMILY_T:
        return EStepQuantities(tau, w, e1, total)
    return EStepQuantities(tau, None, None, total)


def estep_nmoe(data, params):
    """Posterior memberships and log-likelihood for normal experts."""
    if params.family is not Family.NMOE:
        raise UnsupportedFamilyError(f"estep_nmoe needs NMoE params, got {params.family.value}")
    params.check_dims(data)
    return _estep(data, params, FAMILY_NORMAL)


def estep_tmoe(data, params):
    """Memberships, precision weights and expected log-weights for t experts."""
    if params.family is not Family.TMOE:
        raise UnsupportedFamilyError(f"estep_tmoe needs TMoE params, got {params.family.value}")
    params.check_dims(data)
    return _estep(data, params, FAMILY_T)


# ---------------------------------------------------------------------------
# M-step: gating


def _newton_direction(grad, hess):
    neg = -hess
    try:
        step = np.linalg.solve(neg, grad)
        if np.all(np.isfinite(step)):
            return step
    except np.linalg.LinAlgError:
        pass
    try:
        step = np.linalg.solve(neg + _RIDGE_GATING * np.eye(len(grad)), grad)
        if np.all(np.isfinite(step)):
            return step
    except np.linalg.LinAlgError:
        pass
    return None


def irls_gating(tau, data, alpha_init, cfg=None):
    """Maximize Q1(alpha) = sum_i sum_k tau_ik log pi_k(r_i; alpha) by Newton steps.

    A step is accepted only if it increases Q1; otherwise it is halved, up
    to 30 times. Returns an :class:`IrlsResult`; ``failed`` is set (and the
    initial alpha returned) when the Hessian stays singular after ridging.
    """
    cfg = cfg or FitConfig()
    alpha0 = alpha_init.alpha if isinstance(alpha_init, (GatingParams, MoEParams)) else alpha_init
    alpha0 = np.array(alpha0, dtype=float, ndmin=2)
    tau = np.ascontiguousarray(tau, dtype=float)
    R = data.R
    Km1, q = alpha0.shape
    if tau.shape != (data.n, Km1 + 1) or q != data.q:
        raise ValueError("tau / alpha shapes do not match the data")
    if Km1 == 0:
        return IrlsResult(alpha0, 0.0, 0, True)

    alpha = alpha0.copy()
    q1, grad, hess = q1_derivatives(tau, R, alpha)
    for it in range(cfg.irls_max_iters):
        if np.max(np.abs(grad)) <= cfg.irls_tol:
            return IrlsResult(alpha, q1, it, True)
        step = _newton_direction(grad, hess)
        if step is None:
            log.warning("IRLS: singular Hessian after ridge; keeping initial gating")
            return IrlsResult(alpha0, q1_value(tau, R, alpha0), it, False, failed=True)
        # predicted Newton gain below rounding level: stationary in practice
        if 0.5 * float(grad @ step) <= _EPS_GAIN * max(1.0, abs(q1)):
            return IrlsResult(alpha, q1, it, True)
        step = step.reshape(Km1, q)
        t = 1.0
        for _ in range(_MAX_HALVINGS + 1):
            cand = alpha + t * step
            q_cand = q1_value(tau, R, cand)
            if q_cand > q1:
                break
            t *= 0.5
        else:
            # no increasing step left at this precision
            return IrlsResult(alpha, q1, it, False)
        alpha = cand
        q1, grad, hess = q1_derivatives(tau, R, alpha)
    converged = np.max(np.abs(grad)) <= cfg.irls_tol
    return IrlsResult(alpha, q1, cfg.irls_max_iters, bool(converged))


# ---------------------------------------------------------------------------
# M-step: experts


def _wls(X, y, weights):
    sw = np.sqrt(weights)
    A = X * sw[:, None]
    b = y * sw
    if np.linalg.matrix_rank(A) < X.shape[1]:
        gram = A.T @ A + _RIDGE_WLS * np.eye(X.shape[1])
        return np.linalg.solve(gram, A.T @ b)
    # least squares on the scaled design is better conditioned than the
    # normal equations when covariates are large (calendar years, say)
    return np.linalg.lstsq(A, b, rcond=None)[0]


def _check_mass(col_sums, what):
    bad = np.flatnonzero(~(col_sums > 0))
    if bad.size:
        raise DegenerateComponentError(f"{what} column sum is zero for expert(s) {list(bad + 1)}")


def mstep_experts_tmoe(data, tau, w, cfg=None):
    """Weighted least squares update of (beta_k, sigma2_k) with weights tau * w."""
    cfg = cfg or FitConfig()
    tau = np.asarray(tau, dtype=float)
    w = np.ones_like(tau) if w is None else np.asarray(w, dtype=float)
    K = tau.shape[1]
    tw = tau * w
    mass = tau.sum(axis=0)
    wmass = tw.sum(axis=0)
    _check_mass(mass, "tau")
    _check_mass(wmass, "tau*w")
    beta = np.empty((K, data.p))
    sigma2 = np.empty(K)
    for k in range(K):
        beta[k] = _wls(data.X, data.y, tw[:, k])
        resid = data.y - data.X @ beta[k]
        divisor = wmass[k] if cfg.sigma_update is SigmaUpdate.MODIFIED else mass[k]
        sigma2[k] = max(float(np.dot(tw[:, k], resid * resid)) / divisor, cfg.min_sigma2)
    return beta, sigma2


def mstep_experts_nmoe(data, tau, cfg=None):
    """Closed-form (beta_k, sigma2_k) for normal experts given memberships."""
    # with unit precision weights both sigma2 divisors coincide
    return mstep_experts_tmoe(data, tau, None, cfg)


# ---------------------------------------------------------------------------
# M-step: degrees of freedom


def _dof_equation(constant):
    def f(nu):
        return _log_minus_digamma(0.5 * nu) + constant

    return f


def solve_dof(tau_col, w_col, e1_col=None, nu_prev=None, bracket=(0.1, 200.0)):
    """Root of the degrees-of-freedom score equation for one expert.

    Solves log(nu/2) - psi(nu/2) + 1 + sum_i tau_i (e1_i - w_i) / sum_i tau_i = 0,
    where e1 carries the previous-iterate digamma constant. ``e1_col`` may
    be replaced by ``nu_prev``, from which e1 is rebuilt. If the equation has
    no sign change on the bracket, the end with the smaller residual is
    returned with ``saturated`` set.
    """
    lo, hi = (float(v) for v in bracket)
    if not (0 < lo < hi and math.isfinite(hi)):
        raise ValueError(f"invalid bracket {bracket!r}")
    tau_col = np.asarray(tau_col, dtype=float)
    w_col = np.asarray(w_col, dtype=float)
    if e1_col is None:
        if nu_prev is None:
            raise ValueError("need e1_col or nu_prev")
        e1_col = np.log(w_col) - _log_minus_digamma(0.5 * (float(nu_prev) + 1.0))
    e1_col = np.asarray(e1_col, dtype=float)
    mass = tau_col.sum()
    if not mass > 0:
        raise DegenerateComponentError("zero responsibility mass in dof update")
    constant = 1.0 + float(np.dot(tau_col, e1_col - w_col)) / mass
    f = _dof_equation(constant)
    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0.0:
        return DofSolution(lo, 0.0, False)
    if f_hi == 0.0:
        return DofSolution(hi, 0.0, False)
    if (f_lo > 0) == (f_hi > 0):
        if abs(f_lo) < abs(f_hi):
            return DofSolution(lo, f_lo, True)
        return DofSolution(hi, f_hi, True)
    root = brentq(f, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    return DofSolution(root, f(root), False)


# ---------------------------------------------------------------------------
# drivers


def _family_code(family):
    if family is Family.NMOE:
        return FAMILY_NORMAL
    if family is Family.TMOE:
        return FAMILY_T
    raise UnsupportedFamilyError(
        f"fitting {family.value} experts is not implemented (simulation only)"
    )


def _converged(prev, cur, tol):
    delta = abs(cur - prev)
    if abs(cur) <= 1e-12:
        return delta < 1e-12
    return delta / abs(cur) < tol


def run_em(data, init, cfg=None):
    """Run EM (or ECM) from the parameters ``init`` until the stopping rule.

    The log-likelihood is recorded at every E-step, and the loop stops right
    after an E-step, so the returned parameters are those that produced the
    last trace entry. Raises :class:`DegenerateComponentError` if an expert's
    responsibility mass drops below K * 1e-6 * n.
    """
    cfg = cfg or FitConfig()
    family = init.family
    code = _family_code(family)
    init.check_dims(data)
    K, n = init.K, data.n
    params = init
    trace = []
    nu_sat = np.zeros(K, dtype=bool)
    irls_failures = 0
    converged = False
    n_iters = 0
    while True:
        est = _estep(data, params, code)
        if not math.isfinite(est.loglik):
            raise DegenerateComponentError(f"non-finite log-likelihood at iteration {n_iters}")
        trace.append(est.loglik)
        if len(trace) > 1 and _converged(trace[-2], trace[-1], cfg.tol):
            converged = True
            break
        if n_iters >= cfg.max_em_iters:
            break
        mass = est.tau.sum(axis=0)
        if np.any(mass < K * _DEGENERATE_MASS * n):
            raise DegenerateComponentError(
                f"expert(s) {list(np.flatnonzero(mass < K * _DEGENERATE_MASS * n) + 1)} "
                f"lost their responsibility mass at iteration {n_iters}"
            )

        alpha = params.alpha
        if K > 1:
            res = irls_gating(est.tau, data, params.alpha, cfg)
            irls_failures += res.failed
            alpha = res.alpha
        beta, sigma2 = mstep_experts_tmoe(data, est.tau, est.w, cfg)
        params = params.replace(alpha=alpha, beta=beta, sigma2=sigma2)

        if family is Family.TMOE:
            src = est
            if cfg.algorithm is Algorithm.ECM:
                src = _estep(data, params, code)
            nu = np.empty(K)
            for k in range(K):
                sol = solve_dof(src.tau[:, k], src.w[:, k], src.e1[:, k], bracket=cfg.nu_bracket)
                nu[k] = sol.nu
                nu_sat[k] = sol.saturated
            params = params.replace(nu=nu)
        n_iters += 1

    collapsed = bool(np.any(params.sigma2 <= cfg.min_sigma2 * (1.0 + 1e-9)))
    return RunResult(
        params, np.array(trace), n_iters, converged, est, nu_sat.copy(), irls_failures, collapsed
    )


def _hard_partition(rng, n, K, p):
    # uniformly random labels, redrawn while some expert has too few points
    # for its regression; after many failures fall back to a balanced split
    for _ in range(100):
        labels = rng.integers(K, size=n)
        if np.all(np.bincount(labels, minlength=K) >= p + 1):
            return labels
    return rng.permutation(np.arange(n) % K)


def initial_params(data, family, K, cfg, rng):
    """Random starting point for one restart.

    ``alpha`` is zero for ``restart == 0`` callers (see :func:`fit`); the
    draw order is alpha, partition, nu so normal and t fits that share a
    seed also share alpha, beta and sigma2.
    """
    family = Family.parse(family)
    q = data.q
    alpha = rng.uniform(-1.0, 1.0, size=(K - 1, q))
    labels = _hard_partition(rng, data.n, K, data.p)
    tau = np.zeros((data.n, K))
    tau[np.arange(data.n), labels] = 1.0
    beta, sigma2 = mstep_experts_nmoe(data, tau, cfg)
    nu = None
    if family is Family.TMOE:
        lo, hi = cfg.nu_init_range
        nu = np.clip(rng.uniform(lo, hi, size=K), *cfg.nu_bracket)
    return MoEParams(family, alpha, beta, sigma2=sigma2, nu=nu)


def restart_inits(data, family, K, cfg):
    """The ``cfg.n_restarts`` starting points, one independent stream each."""
    children = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.n_restarts)
    inits = []
    for i, child in enumerate(children):
        init = initial_params(data, family, K, cfg, np.random.default_rng(child))
        if i == 0:
            init = init.replace(alpha=np.zeros_like(init.alpha))
        inits.append(init)
    return inits


def fit(data, family, K, cfg=None):
    """Best-of-restarts maximum-likelihood fit of a K-expert model."""
    cfg = cfg or FitConfig()
    family = Family.parse(family)
    _family_code(family)
    if K < 1:
        raise ValueError("K must be >= 1")
    eta = free_params(family, K, data.p, data.q)
    if data.n <= eta:
        warnings.warn(
            f"n={data.n} does not exceed the {eta} free parameters of a K={K} {family.value}",
            RuntimeWarning,
            stacklevel=2,
        )

    best, best_idx = None, -1
    diagnostics, logliks = [], []
    for i, init in enumerate(restart_inits(data, family, K, cfg)):
        try:
            run = run_em(data, init, cfg)
        except (DegenerateComponentError, np.linalg.LinAlgError, FloatingPointError) as exc:
            diagnostics.append(f"restart {i}: {exc}")
            logliks.append(float("nan"))
            continue
        final = float(run.loglik_trace[-1])
        logliks.append(final)
        if not run.converged:
            diagnostics.append(f"restart {i}: hit max_em_iters={cfg.max_em_iters}")
        if run.collapsed:
            diagnostics.append(f"restart {i}: an expert variance collapsed to min_sigma2")
        # a variance pinned at the floor marks a likelihood singularity, so
        # such runs only win when every restart collapsed
        if best is None or (not run.collapsed, final) > (not best.collapsed, best.loglik_trace[-1]):
            best, best_idx = run, i
    if best is None:
        raise FitFailedError(
            f"all {cfg.n_restarts} restarts of the K={K} {family.value} fit degenerated",
            diagnostics,
        )

    order = canonical_order_index(best.params)
    params = permute(best.params, order)
    estep_final = best.estep_final.permuted(order)
    ll = float(best.loglik_trace[-1])
    cll = complete_loglik(data, params, estep_final.tau)
    return FitResult(
        params=params,
        loglik_trace=best.loglik_trace,
        n_iters=best.n_iters,
        converged=best.converged,
        estep_final=estep_final,
        criteria=criteria(ll, cll, eta, data.n),
        loglik=ll,
        complete_loglik=cll,
        n_free_params=eta,
        nu_saturated=best.nu_saturated[order],
        best_restart=best_idx,
        collapsed=best.collapsed,
        restart_logliks=logliks,
        diagnostics=diagnostics,
    )
