"""Special functions and log-density kernels.

Everything is evaluated in the log domain. Scalar kernels are ``math``
code under ``@njit`` (plain Python when numba is disabled); array kernels
have a numba loop and a vectorised numpy twin, chosen by
:mod:`moe_robust._accel`.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _accel
from ._accel import njit
from .exceptions import DomainError

LOG_2PI = math.log(2.0 * math.pi)
HALF_LOG_2PI = 0.5 * LOG_2PI

# Lanczos approximation, g = 7, n = 9.
_LANCZOS_G = 7.0
_LANCZOS = np.array(
    [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ]
)
_STIRLING_MIN = 15.0
_PSI_MIN = 10.0
_HALF_RATIO_MIN = 100.0


# ---------------------------------------------------------------------------
# scalar kernels


@njit
def _lgamma_core(x):
    # x >= 0.5
    if x >= _STIRLING_MIN:
        z = 1.0 / (x * x)
        series = (
            1.0 / 12.0
            - z * (1.0 / 360.0 - z * (1.0 / 1260.0 - z * (1.0 / 1680.0 - z / 1188.0)))
        ) / x
        return (x - 0.5) * math.log(x) - x + HALF_LOG_2PI + series
    xm = x - 1.0
    a = _LANCZOS[0]
    for i in range(1, 9):
        a += _LANCZOS[i] / (xm + i)
    t = xm + _LANCZOS_G + 0.5
    return HALF_LOG_2PI + (xm + 0.5) * math.log(t) - t + math.log(a)


@njit
def _lgamma(x):
    if x < 0.5:
        return math.log(math.pi / math.sin(math.pi * x)) - _lgamma_core(1.0 - x)
    return _lgamma_core(x)


@njit
def _psi_asymptotic(x):
    z = 1.0 / (x * x)
    tail = z * (
        1.0 / 12.0
        - z
        * (
            1.0 / 120.0
            - z * (1.0 / 252.0 - z * (1.0 / 240.0 - z * (1.0 / 132.0 - z * 691.0 / 32760.0)))
        )
    )
    return math.log(x) - 0.5 / x - tail


@njit
def _digamma(x):
    acc = 0.0
    while x < _PSI_MIN:
        acc -= 1.0 / x
        x += 1.0
    return acc + _psi_asymptotic(x)


@njit
def _log_minus_digamma(x):
    """log(x) - psi(x) without the cancellation of the naive difference."""
    shifted = x
    acc = 0.0
    while shifted < _PSI_MIN:
        acc += 1.0 / shifted
        shifted += 1.0
    z = 1.0 / (shifted * shifted)
    series = 0.5 / shifted + z * (
        1.0 / 12.0
        - z
        * (
            1.0 / 120.0
            - z * (1.0 / 252.0 - z * (1.0 / 240.0 - z * (1.0 / 132.0 - z * 691.0 / 32760.0)))
        )
    )
    if shifted != x:
        acc += math.log(x / shifted)
    return acc + series


@njit
def _lgamma_half_ratio(a):
    """log Gamma(a + 1/2) - log Gamma(a)."""
    if a >= _HALF_RATIO_MIN:
        inv = 1.0 / a
        inv2 = inv * inv
        return 0.5 * math.log(a) - inv * (
            0.125 - inv2 * (1.0 / 192.0 + inv2 * (1.0 / 640.0 - inv2 * 17.0 / 14336.0))
        )
    return _lgamma(a + 0.5) - _lgamma(a)


@njit
def _t_logpdf(y, mu, sigma2, nu):
    r = y - mu
    d2 = r * r / sigma2
    return (
        _lgamma_half_ratio(0.5 * nu)
        - 0.5 * math.log(nu * math.pi * sigma2)
        - 0.5 * (nu + 1.0) * math.log1p(d2 / nu)
    )


@njit
def _normal_logpdf(y, mu, sigma2):
    r = y - mu
    return -0.5 * (LOG_2PI + math.log(sigma2)) - 0.5 * r * r / sigma2


# ---------------------------------------------------------------------------
# array kernels


@njit
def _map_nb(kind, x):
    flat_in = x.ravel()
    flat_out = np.empty(flat_in.size)
    for i in range(flat_in.size):
        if kind == 0:
            flat_out[i] = _lgamma(flat_in[i])
        else:
            flat_out[i] = _digamma(flat_in[i])
    return flat_out.reshape(x.shape)


def _lgamma_core_np(x):
    out = np.empty_like(x)
    big = x >= _STIRLING_MIN
    if big.any():
        xb = x[big]
        z = 1.0 / (xb * xb)
        series = (
            1.0 / 12.0
            - z * (1.0 / 360.0 - z * (1.0 / 1260.0 - z * (1.0 / 1680.0 - z / 1188.0)))
        ) / xb
        out[big] = (xb - 0.5) * np.log(xb) - xb + HALF_LOG_2PI + series
    small = ~big
    if small.any():
        xm = x[small] - 1.0
        a = np.full_like(xm, _LANCZOS[0])
        for i in range(1, 9):
            a += _LANCZOS[i] / (xm + i)
        t = xm + _LANCZOS_G + 0.5
        out[small] = HALF_LOG_2PI + (xm + 0.5) * np.log(t) - t + np.log(a)
    return out


def _lgamma_np(x):
    reflect = x < 0.5
    core = _lgamma_core_np(np.where(reflect, 1.0 - x, x))
    with np.errstate(divide="ignore", invalid="ignore"):
        refl = np.log(np.pi / np.sin(np.pi * x)) - core
    return np.where(reflect, refl, core)


def _digamma_np(x):
    acc = np.zeros_like(x)
    z = x.copy()
    while True:
        low = z < _PSI_MIN
        if not low.any():
            break
        acc[low] -= 1.0 / z[low]
        z[low] += 1.0
    w = 1.0 / (z * z)
    tail = w * (
        1.0 / 12.0
        - w
        * (
            1.0 / 120.0
            - w * (1.0 / 252.0 - w * (1.0 / 240.0 - w * (1.0 / 132.0 - w * 691.0 / 32760.0)))
        )
    )
    return acc + np.log(z) - 0.5 / z - tail


def lgamma_half_ratio_np(a):
    a = np.asarray(a, dtype=float)
    inv = 1.0 / a
    inv2 = inv * inv
    series = 0.5 * np.log(a) - inv * (
        0.125 - inv2 * (1.0 / 192.0 + inv2 * (1.0 / 640.0 - inv2 * 17.0 / 14336.0))
    )
    direct = _lgamma_np(a + 0.5) - _lgamma_np(a)
    return np.where(a >= _HALF_RATIO_MIN, series, direct)


def t_logpdf_np(y, mu, sigma2, nu):
    """Unchecked, broadcasting t log-density (numpy path)."""
    r = y - mu
    d2 = r * r / sigma2
    return (
        lgamma_half_ratio_np(0.5 * nu)
        - 0.5 * np.log(nu * np.pi * sigma2)
        - 0.5 * (nu + 1.0) * np.log1p(d2 / nu)
    )


def normal_logpdf_np(y, mu, sigma2):
    r = y - mu
    return -0.5 * (LOG_2PI + np.log(sigma2)) - 0.5 * r * r / sigma2


# ---------------------------------------------------------------------------
# public, validated API


def _check_real(name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite, got {value!r}")
    return arr


def _check_positive(name, value):
    arr = _check_real(name, value)
    if np.any(arr <= 0):
        raise DomainError(f"{name} must be strictly positive, got {value!r}")
    return arr


def _scalar_or_array(arr, out):
    return float(out) if arr.ndim == 0 else out


def log_gamma_fn(x):
    """Natural log of the Gamma function for positive ``x`` (scalar or array)."""
    arr = _check_positive("x", x)
    if arr.ndim == 0:
        return _lgamma(float(arr))
    if _accel.use_numba():
        return _map_nb(0, np.ascontiguousarray(arr))
    return _lgamma_np(arr)


def digamma_fn(x):
    """Digamma function psi(x) = d/dx log Gamma(x) for positive ``x``."""
    arr = _check_positive("x", x)
    if arr.ndim == 0:
        return _digamma(float(arr))
    if _accel.use_numba():
        return _map_nb(1, np.ascontiguousarray(arr))
    return _digamma_np(arr)


def log_minus_digamma(x):
    """``log(x) - digamma(x)`` evaluated stably for large ``x``."""
    arr = _check_positive("x", x)
    if arr.ndim == 0:
        return _log_minus_digamma(float(arr))
    return np.vectorize(_log_minus_digamma, otypes=[float])(arr)


@dataclass(frozen=True)
class TParams:
    """Location, squared scale and degrees of freedom of a Student t law."""

    mu: float
    sigma2: float
    nu: float

    def __post_init__(self):
        _check_real("mu", self.mu)
        _check_positive("sigma2", self.sigma2)
        _check_positive("nu", self.nu)


def t_logpdf(y, p):
    """Log-density of the Student t distribution with parameters ``p``.

    ``y`` may be a scalar or an array.
    """
    if not isinstance(p, TParams):
        p = TParams(*p)
    arr = _check_real("y", y)
    if arr.ndim == 0:
        return _t_logpdf(float(arr), float(p.mu), float(p.sigma2), float(p.nu))
    return t_logpdf_np(arr, float(p.mu), float(p.sigma2), float(p.nu))


def normal_logpdf(y, mu, sigma2):
    arr = _check_real("y", y)
    _check_real("mu", mu)
    _check_positive("sigma2", sigma2)
    if arr.ndim == 0 and np.ndim(mu) == 0 and np.ndim(sigma2) == 0:
        return _normal_logpdf(float(arr), float(mu), float(sigma2))
    return normal_logpdf_np(arr, np.asarray(mu, float), np.asarray(sigma2, float))


def laplace_logpdf(y, mu, lam):
    """Laplace log-density with location ``mu`` and scale ``lam``."""
    arr = _check_real("y", y)
    _check_real("mu", mu)
    lam = _check_positive("lambda", lam)
    out = -np.log(2.0 * lam) - np.abs(arr - mu) / lam
    return _scalar_or_array(np.asarray(out), out)


def gamma_logpdf(u, shape, rate):
    """Shape-rate gamma log-density: f(u) = b^a u^(a-1) exp(-b u) / Gamma(a)."""
    arr = _check_positive("u", u)
    shape = float(_check_positive("shape", shape))
    rate = float(_check_positive("rate", rate))
    out = shape * math.log(rate) + (shape - 1.0) * np.log(arr) - rate * arr - _lgamma(shape)
    return _scalar_or_array(arr, out)


def t_pdf(y, p):
    return np.exp(t_logpdf(y, p))


def normal_pdf(y, mu, sigma2):
    return np.exp(normal_logpdf(y, mu, sigma2))
