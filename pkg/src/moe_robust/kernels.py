"""Hot array kernels: gating softmax, E-step, and IRLS derivatives.

Each kernel has an ``_nb`` loop implementation compiled with numba and an
``_np`` vectorised implementation; the public wrappers dispatch on
:func:`moe_robust._accel.use_numba`.
"""

import math

import numpy as np

from . import _accel
from ._accel import njit
from .densities import (
    _lgamma_half_ratio,
    _log_minus_digamma,
    LOG_2PI,
    lgamma_half_ratio_np,
)

FAMILY_NORMAL = 0
FAMILY_T = 1


# ---------------------------------------------------------------------------
# numba


@njit
def _log_gate_row(R, i, alpha, out):
    K = alpha.shape[0] + 1
    q = R.shape[1]
    m = 0.0  # reference gate has eta = 0
    for k in range(K - 1):
        s = 0.0
        for j in range(q):
            s += R[i, j] * alpha[k, j]
        out[k] = s
        if s > m:
            m = s
    out[K - 1] = 0.0
    # shift before the log of the sum so large logits keep their precision
    acc = 0.0
    for k in range(K):
        out[k] -= m
        acc += math.exp(out[k])
    log_acc = math.log(acc)
    for k in range(K):
        out[k] -= log_acc


@njit
def _log_gate_probs_nb(R, alpha):
    n = R.shape[0]
    K = alpha.shape[0] + 1
    out = np.empty((n, K))
    row = np.empty(K)
    for i in range(n):
        _log_gate_row(R, i, alpha, row)
        for k in range(K):
            out[i, k] = row[k]
    return out


@njit
def _estep_nb(y, X, R, alpha, beta, sigma2, nu, family):
    n = y.shape[0]
    K = beta.shape[0]
    p = X.shape[1]
    tau = np.empty((n, K))
    w = np.ones((n, K))
    e1 = np.zeros((n, K))
    joint = np.empty((n, K))
    const = np.empty(K)
    e1_shift = np.zeros(K)
    for k in range(K):
        if family == 1:
            const[k] = _lgamma_half_ratio(0.5 * nu[k]) - 0.5 * math.log(nu[k] * math.pi * sigma2[k])
            e1_shift[k] = -_log_minus_digamma(0.5 * (nu[k] + 1.0))
        else:
            const[k] = -0.5 * (LOG_2PI + math.log(sigma2[k]))
    logpi = np.zeros(K)
    total = 0.0
    for i in range(n):
        if K > 1:
            _log_gate_row(R, i, alpha, logpi)
        m = -np.inf
        for k in range(K):
            mu = 0.0
            for j in range(p):
                mu += X[i, j] * beta[k, j]
            r = y[i] - mu
            d2 = r * r / sigma2[k]
            if family == 1:
                lf = const[k] - 0.5 * (nu[k] + 1.0) * math.log1p(d2 / nu[k])
                wik = (nu[k] + 1.0) / (nu[k] + d2)
                w[i, k] = wik
                e1[i, k] = math.log(wik) + e1_shift[k]
            else:
                lf = const[k] - 0.5 * d2
            v = logpi[k] + lf
            joint[i, k] = v
            if v > m:
                m = v
        acc = 0.0
        for k in range(K):
            acc += math.exp(joint[i, k] - m)
        lse = m + math.log(acc)
        total += lse
        for k in range(K):
            tau[i, k] = math.exp(joint[i, k] - lse)
    return tau, w, e1, total, joint


@njit
def _q1_nb(tau, R, alpha):
    n = R.shape[0]
    K = alpha.shape[0] + 1
    row = np.empty(K)
    total = 0.0
    for i in range(n):
        _log_gate_row(R, i, alpha, row)
        for k in range(K):
            total += tau[i, k] * row[k]
    return total


@njit
def _q1_derivs_nb(tau, R, alpha):
    n, q = R.shape
    Km1 = alpha.shape[0]
    K = Km1 + 1
    d = Km1 * q
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    row = np.empty(K)
    total = 0.0
    for i in range(n):
        _log_gate_row(R, i, alpha, row)
        for k in range(K):
            total += tau[i, k] * row[k]
        for k in range(Km1):
            pk = math.exp(row[k])
            g = tau[i, k] - pk
            for a in range(q):
                grad[k * q + a] += g * R[i, a]
            for l in range(Km1):
                pl = math.exp(row[l])
                c = -pk * ((1.0 if k == l else 0.0) - pl)
                for a in range(q):
                    ca = c * R[i, a]
                    for b in range(q):
                        hess[k * q + a, l * q + b] += ca * R[i, b]
    return total, grad, hess


# ---------------------------------------------------------------------------
# numpy


def _logsumexp_np(a):
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def _log_gate_probs_np(R, alpha):
    eta = np.hstack([R @ alpha.T, np.zeros((R.shape[0], 1))])
    eta -= eta.max(axis=1, keepdims=True)
    return eta - np.log(np.exp(eta).sum(axis=1, keepdims=True))


def _estep_np(y, X, R, alpha, beta, sigma2, nu, family):
    n = y.shape[0]
    K = beta.shape[0]
    logpi = _log_gate_probs_np(R, alpha) if K > 1 else np.zeros((n, 1))
    resid = y[:, None] - X @ beta.T
    d2 = resid * resid / sigma2
    if family == FAMILY_T:
        const = lgamma_half_ratio_np(0.5 * nu) - 0.5 * np.log(nu * np.pi * sigma2)
        logf = const - 0.5 * (nu + 1.0) * np.log1p(d2 / nu)
        w = (nu + 1.0) / (nu + d2)
        shift = np.array([_log_minus_digamma(0.5 * (v + 1.0)) for v in nu])
        e1 = np.log(w) - shift
    else:
        logf = -0.5 * (LOG_2PI + np.log(sigma2)) - 0.5 * d2
        w = np.ones((n, K))
        e1 = np.zeros((n, K))
    joint = logpi + logf
    lse = _logsumexp_np(joint)
    tau = np.exp(joint - lse[:, None])
    return tau, w, e1, float(lse.sum()), joint


def _q1_np(tau, R, alpha):
    return float(np.sum(tau * _log_gate_probs_np(R, alpha)))


def _q1_derivs_np(tau, R, alpha):
    n, q = R.shape
    Km1 = alpha.shape[0]
    logpi = _log_gate_probs_np(R, alpha)
    pi = np.exp(logpi[:, :Km1])
    total = float(np.sum(tau * logpi))
    grad = ((tau[:, :Km1] - pi).T @ R).ravel()
    # weights for block (k, l): -pi_k (delta_kl - pi_l)
    wts = pi[:, :, None] * pi[:, None, :]
    idx = np.arange(Km1)
    wts[:, idx, idx] -= pi
    hess = np.einsum("ikl,ia,ib->kalb", wts, R, R).reshape(Km1 * q, Km1 * q)
    return total, grad, hess


# ---------------------------------------------------------------------------
# dispatch


def log_gate_probs(R, alpha):
    R = np.ascontiguousarray(R, dtype=float)
    alpha = np.ascontiguousarray(alpha, dtype=float).reshape(-1, R.shape[1])
    if alpha.shape[0] == 0:
        return np.zeros((R.shape[0], 1))
    if _accel.use_numba():
        return _log_gate_probs_nb(R, alpha)
    return _log_gate_probs_np(R, alpha)


def logsumexp_rows(a):
    return _logsumexp_np(np.asarray(a, dtype=float))


def estep_arrays(y, X, R, alpha, beta, sigma2, nu, family):
    """Responsibilities, t weights, expected log-weights and log-likelihood.

    ``family`` is ``FAMILY_NORMAL`` or ``FAMILY_T``; for normal experts ``w``
    is all ones and ``e1`` all zeros. Also returns the (n, K) joint log terms.
    """
    K = beta.shape[0]
    alpha = np.ascontiguousarray(alpha, dtype=float).reshape(K - 1, R.shape[1])
    nu_arr = np.ascontiguousarray(nu if nu is not None else np.full(K, np.inf), dtype=float)
    if _accel.use_numba():
        return _estep_nb(y, X, R, alpha, np.ascontiguousarray(beta), sigma2, nu_arr, family)
    return _estep_np(y, X, R, alpha, beta, sigma2, nu_arr, family)


def q1_value(tau, R, alpha):
    if _accel.use_numba():
        return _q1_nb(tau, R, np.ascontiguousarray(alpha))
    return _q1_np(tau, R, alpha)


def q1_derivatives(tau, R, alpha):
    """Q1 value, gradient (flattened (K-1)*q) and Hessian."""
    if _accel.use_numba():
        return _q1_derivs_nb(tau, R, np.ascontiguousarray(alpha))
    return _q1_derivs_np(tau, R, alpha)


def component_logpdf(data, params):
    """log f_k(y_i | x_i) for every observation and expert, shape (n, K)."""
    from .model import Family  # local import: model imports this module

    mu = data.X @ params.beta.T
    y = data.y[:, None]
    if params.family is Family.NMOE:
        resid = y - mu
        return -0.5 * (LOG_2PI + np.log(params.sigma2)) - 0.5 * resid * resid / params.sigma2
    if params.family is Family.TMOE:
        from .densities import t_logpdf_np

        return t_logpdf_np(y, mu, params.sigma2, params.nu)
    return -np.log(2.0 * params.lam) - np.abs(y - mu) / params.lam
