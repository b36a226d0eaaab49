"""Mixture-of-experts parameter containers and model-level quantities.

Gating is a multinomial logistic model whose last component carries the
null coefficient vector. Experts are linear regressions with normal (NMoE)
or Student t (TMoE) noise; Laplace experts (``LMoE-sim``) exist only so the
simulator can draw from them.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .exceptions import DomainError, UndefinedMomentError, UnsupportedFamilyError
from .kernels import component_logpdf, log_gate_probs, logsumexp_rows


class Family(str, Enum):
    NMOE = "NMoE"
    TMOE = "TMoE"
    LMOE_SIM = "LMoE-sim"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for member in cls:
            if member.value.lower() == key or member.value.lower().split("-")[0] == key:
                return member
        raise UnsupportedFamilyError(f"unknown family {value!r}")


def _frozen(arr, ndim, name):
    out = np.array(arr, dtype=float, ndmin=ndim)
    if out.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """Responses ``y`` with expert design ``X`` (n, p) and gating design ``R`` (n, q).

    Both designs carry a leading column of ones.
    """

    y: np.ndarray
    X: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        y = _frozen(self.y, 1, "y")
        X = _frozen(self.X, 2, "X")
        R = _frozen(self.R, 2, "R")
        n = y.shape[0]
        if n < 1:
            raise ValueError("dataset needs at least one observation")
        if X.shape[0] != n or R.shape[0] != n:
            raise ValueError(f"row counts differ: y={n}, X={X.shape[0]}, R={R.shape[0]}")
        for name, arr in (("y", y), ("X", X), ("R", R)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if not (np.all(X[:, 0] == 1.0) and np.all(R[:, 0] == 1.0)):
            raise ValueError("first column of X and R must be the intercept (all ones)")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "R", R)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def q(self):
        return self.R.shape[1]

    @classmethod
    def from_covariates(cls, x, y, r=None):
        """Build a dataset from raw covariate columns, prepending intercepts.

        ``x`` and ``r`` may be 1-d (one covariate) or 2-d (several columns).
        ``r`` defaults to ``x``.
        """
        x = np.asarray(x, dtype=float)
        x = x[:, None] if x.ndim == 1 else x
        r = x if r is None else np.asarray(r, dtype=float)
        r = r[:, None] if r.ndim == 1 else r
        ones = np.ones((x.shape[0], 1))
        return cls(y=y, X=np.hstack([ones, x]), R=np.hstack([np.ones((r.shape[0], 1)), r]))

    def subset(self, index):
        return Dataset(self.y[index], self.X[index], self.R[index])

    def append(self, other):
        return Dataset(
            np.concatenate([self.y, other.y]),
            np.vstack([self.X, other.X]),
            np.vstack([self.R, other.R]),
        )


@dataclass(frozen=True)
class GatingParams:
    """Coefficients of the first K-1 gates; gate K is implicitly zero."""

    alpha: np.ndarray  # (K-1, q)

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen(self.alpha, 2, "alpha"))

    @property
    def K(self):
        return self.alpha.shape[0] + 1

    @property
    def q(self):
        return self.alpha.shape[1]

    def full(self):
        """All K coefficient rows, the reference row included."""
        return np.vstack([self.alpha, np.zeros((1, self.q))])


@dataclass(frozen=True)
class ExpertParams:
    beta: np.ndarray
    sigma2: Optional[float] = None
    nu: Optional[float] = None
    lam: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(self.beta, 1, "beta"))
        for name in ("sigma2", "nu", "lam"):
            value = getattr(self, name)
            if value is not None and not (math.isfinite(value) and value > 0):
                raise DomainError(f"{name} must be positive, got {value!r}")


@dataclass(frozen=True, eq=False)
class MoEParams:
    """Full parameter vector of a K-component mixture of linear experts.

    Stored column-wise for the numeric kernels: ``alpha`` (K-1, q),
    ``beta`` (K, p), ``sigma2`` (K,), and ``nu`` (K,) for t experts or
    ``lam`` (K,) for Laplace experts.
    """

    family: Family
    alpha: np.ndarray
    beta: np.ndarray
    sigma2: Optional[np.ndarray] = None
    nu: Optional[np.ndarray] = None
    lam: Optional[np.ndarray] = None

    def __post_init__(self):
        family = Family.parse(self.family)
        object.__setattr__(self, "family", family)
        beta = _frozen(self.beta, 2, "beta")
        K = beta.shape[0]
        if K < 1:
            raise ValueError("need at least one expert")
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.size == 0:
            alpha = np.zeros((0, alpha.shape[-1] if alpha.ndim == 2 else 0))
        alpha = _frozen(alpha, 2, "alpha")
        if alpha.shape[0] != K - 1:
            raise ValueError(f"alpha needs K-1={K - 1} rows, got {alpha.shape[0]}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

        def vec(name, required):
            value = getattr(self, name)
            if value is None:
                if required:
                    raise ValueError(f"{family.value} experts need {name}")
                return
            arr = _frozen(value, 1, name)
            if arr.shape != (K,):
                raise ValueError(f"{name} must have length K={K}")
            if not np.all(np.isfinite(arr) & (arr > 0)):
                raise DomainError(f"{name} must be strictly positive, got {arr}")
            object.__setattr__(self, name, arr)

        vec("sigma2", family is not Family.LMOE_SIM)
        vec("nu", family is Family.TMOE)
        vec("lam", family is Family.LMOE_SIM)
        if family is not Family.TMOE and self.nu is not None:
            raise ValueError(f"{family.value} experts carry no degrees of freedom")

    @property
    def K(self):
        return self.beta.shape[0]

    @property
    def p(self):
        return self.beta.shape[1]

    @property
    def q(self):
        return self.alpha.shape[1]

    @property
    def gating(self):
        return GatingParams(self.alpha)

    @property
    def experts(self):
        out = []
        for k in range(self.K):
            out.append(
                ExpertParams(
                    beta=self.beta[k],
                    sigma2=None if self.sigma2 is None else float(self.sigma2[k]),
                    nu=None if self.nu is None else float(self.nu[k]),
                    lam=None if self.lam is None else float(self.lam[k]),
                )
            )
        return out

    @classmethod
    def from_experts(cls, family, gating, experts):
        family = Family.parse(family)

        def stack(name):
            values = [getattr(e, name) for e in experts]
            return None if any(v is None for v in values) else np.array(values)

        alpha = gating.alpha if isinstance(gating, GatingParams) else gating
        return cls(
            family,
            alpha,
            np.array([e.beta for e in experts]),
            sigma2=stack("sigma2"),
            nu=stack("nu") if family is Family.TMOE else None,
            lam=stack("lam") if family is Family.LMOE_SIM else None,
        )

    def replace(self, **changes):
        fields = dict(
            family=self.family,
            alpha=self.alpha,
            beta=self.beta,
            sigma2=self.sigma2,
            nu=self.nu,
            lam=self.lam,
        )
        fields.update(changes)
        return MoEParams(**fields)

    def __eq__(self, other):
        if not isinstance(other, MoEParams) or self.family is not other.family:
            return NotImplemented if not isinstance(other, MoEParams) else False
        for name in ("alpha", "beta", "sigma2", "nu", "lam"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not (a.shape == b.shape and np.array_equal(a, b)):
                return False
        return True

    __hash__ = None

    def check_dims(self, data):
        if data.p != self.p:
            raise ValueError(f"expert design has p={data.p}, parameters expect {self.p}")
        if self.K > 1 and data.q != self.q:
            raise ValueError(f"gating design has q={data.q}, parameters expect {self.q}")

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        experts = []
        for k in range(self.K):
            entry = {"beta": [float(b) for b in self.beta[k]]}
            if self.sigma2 is not None:
                entry["sigma2"] = float(self.sigma2[k])
            if self.nu is not None:
                entry["nu"] = float(self.nu[k])
            if self.lam is not None:
                entry["lambda"] = float(self.lam[k])
            experts.append(entry)
        return {
            "family": self.family.value,
            "K": self.K,
            "p": self.p,
            "q": self.q,
            "alpha": [[float(a) for a in row] for row in self.alpha],
            "experts": experts,
        }

    @classmethod
    def from_dict(cls, doc):
        family = Family.parse(doc["family"])
        K = int(doc["K"])
        experts = doc["experts"]
        if len(experts) != K:
            raise ValueError(f"document declares K={K} but lists {len(experts)} experts")
        q = int(doc.get("q", 0))
        alpha = np.array(doc.get("alpha", []), dtype=float).reshape(K - 1, q)
        beta = np.array([e["beta"] for e in experts], dtype=float)
        if beta.shape[1] != int(doc["p"]):
            raise ValueError("beta length disagrees with p")

        def col(key):
            if all(key in e for e in experts):
                return np.array([e[key] for e in experts], dtype=float)
            return None

        return cls(family, alpha, beta, sigma2=col("sigma2"), nu=col("nu"), lam=col("lambda"))

    def to_json(self):
        # repr-based float formatting round-trips every double exactly
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# gating and likelihood


def gate_probs(r, g):
    """Gating probabilities pi_k(r; alpha) for one covariate vector or a batch.

    ``g`` may be :class:`GatingParams`, :class:`MoEParams` or an alpha array
    with K-1 rows.
    """
    alpha = _alpha_of(g)
    r = np.asarray(r, dtype=float)
    single = r.ndim == 1
    R = np.atleast_2d(r)
    if alpha.shape[0] and R.shape[1] != alpha.shape[1]:
        raise ValueError(f"r has length {R.shape[1]}, gating expects {alpha.shape[1]}")
    probs = np.exp(log_gate_probs(R, alpha))
    return probs[0] if single else probs


def _alpha_of(g):
    if isinstance(g, MoEParams):
        return g.alpha
    if isinstance(g, GatingParams):
        return g.alpha
    return np.atleast_2d(np.asarray(g, dtype=float))


def _require_fittable(params):
    if params.family is Family.LMOE_SIM:
        raise UnsupportedFamilyError("LMoE-sim parameters are only usable for simulation")


def joint_log_terms(data, params):
    """log(pi_k(r_i) f_k(y_i | x_i)) as an (n, K) array."""
    params.check_dims(data)
    log_pi = log_gate_probs(data.R, params.alpha) if params.K > 1 else np.zeros((data.n, 1))
    return log_pi + component_logpdf(data, params)


def loglik(data, params):
    """Observed-data log-likelihood of a normal or t mixture of experts."""
    _require_fittable(params)
    return float(logsumexp_rows(joint_log_terms(data, params)).sum())


def complete_loglik(data, params, tau=None):
    """Complete-data log-likelihood with labels set by the MAP rule.

    Equals :func:`loglik` exactly when the posterior is a hard partition.
    """
    log_terms = joint_log_terms(data, params)
    if tau is None:
        tau = np.exp(log_terms - logsumexp_rows(log_terms)[:, None])
    labels = np.argmax(tau, axis=1)
    return float(log_terms[np.arange(data.n), labels].sum())


def _expert_means(X, params):
    return np.atleast_2d(X) @ params.beta.T


def predict_mean(x, r, params):
    """Predictive mean sum_k pi_k(r) beta_k^T x (vectorised over rows).

    Also defined for ``LMoE-sim`` parameters, whose experts are centred on
    their regression lines.
    """
    if params.family is Family.TMOE and np.any(params.nu <= 1.0):
        raise UndefinedMomentError(f"t expert mean needs nu > 1, got nu={params.nu}")
    single = np.ndim(x) == 1
    means = _expert_means(x, params)
    pis = np.atleast_2d(gate_probs(np.atleast_2d(r), params)) if params.K > 1 else 1.0
    out = np.sum(pis * means, axis=1)
    return float(out[0]) if single else out


def expert_variances(params):
    if params.family is Family.NMOE:
        return np.asarray(params.sigma2)
    if params.family is Family.TMOE:
        if np.any(params.nu <= 2.0):
            raise UndefinedMomentError(
                f"t expert variance needs nu > 2, got nu={params.nu}; no confidence band"
            )
        return params.nu * params.sigma2 / (params.nu - 2.0)
    raise UnsupportedFamilyError(params.family.value)


def predict_variance(x, r, params):
    """Predictive variance of the mixture at (x, r)."""
    _require_fittable(params)
    v = expert_variances(params)
    single = np.ndim(x) == 1
    means = _expert_means(x, params)
    pis = np.atleast_2d(gate_probs(np.atleast_2d(r), params)) if params.K > 1 else np.ones_like(means)
    m = np.sum(pis * means, axis=1)
    out = np.sum(pis * (means**2 + v), axis=1) - m**2
    out = np.maximum(out, 0.0)
    return float(out[0]) if single else out


def map_cluster(tau):
    """Hard labels 1..K by the MAP rule; ties go to the lowest index."""
    tau = np.atleast_2d(np.asarray(tau, dtype=float))
    if not np.all(np.isfinite(tau)) or np.any(tau < 0):
        raise ValueError("responsibilities must be finite and non-negative")
    if np.any(np.abs(tau.sum(axis=1) - 1.0) > 1e-8):
        raise ValueError("responsibility rows must sum to 1")
    return np.argmax(tau, axis=1) + 1


# ---------------------------------------------------------------------------
# model selection


def free_params(family, K, p, q):
    family = Family.parse(family)
    if K < 1 or p < 1 or q < 1:
        raise ValueError("K, p and q must be >= 1")
    per_expert = {Family.NMOE: 3, Family.TMOE: 4}.get(family)
    if per_expert is None:
        raise UnsupportedFamilyError(f"no parameter count for {family.value}")
    return K * (p + q + per_expert) - q - 1


def criteria(loglik, complete_loglik, eta, n):
    """AIC, BIC and ICL written as criteria to maximise."""
    if n < 1 or eta < 1:
        raise ValueError("need n >= 1 and eta >= 1")
    penalty = eta * math.log(n) / 2.0
    return {
        "aic": loglik - eta,
        "bic": loglik - penalty,
        "icl": complete_loglik - penalty,
    }


@dataclass
class SelectionRow:
    K: int
    loglik: float = float("nan")
    complete_loglik: float = float("nan")
    n_free_params: int = 0
    bic: float = float("nan")
    aic: float = float("nan")
    icl: float = float("nan")
    error: str = ""


@dataclass
class SelectionTable:
    family: Family
    n: int
    rows: dict = field(default_factory=dict)

    def add(self, row):
        self.rows[row.K] = row

    def best(self, criterion):
        ok = {K: getattr(r, criterion) for K, r in self.rows.items() if not r.error}
        ok = {K: v for K, v in ok.items() if math.isfinite(v)}
        if not ok:
            return None
        return max(ok, key=lambda K: (ok[K], -K))


# ---------------------------------------------------------------------------
# label canonicalization


def permute(params, order):
    """Reorder experts; gating is re-referenced to the new last component."""
    order = np.asarray(order)
    changes = {"beta": params.beta[order]}
    for name in ("sigma2", "nu", "lam"):
        value = getattr(params, name)
        if value is not None:
            changes[name] = value[order]
    if params.K > 1:
        full = np.vstack([params.alpha, np.zeros((1, params.alpha.shape[1]))])[order]
        changes["alpha"] = (full - full[-1])[:-1]
    return params.replace(**changes)


def canonical_order_index(params):
    keys = [params.beta[:, j] for j in range(params.p)]
    if params.sigma2 is not None:
        keys.append(params.sigma2)
    if params.nu is not None:
        keys.append(params.nu)
    if params.lam is not None:
        keys.append(params.lam)
    # np.lexsort sorts by the last key first
    return np.lexsort(keys[::-1])


def canonical_order(params):
    """Experts sorted lexicographically by (beta, sigma2, nu)."""
    return permute(params, canonical_order_index(params))
