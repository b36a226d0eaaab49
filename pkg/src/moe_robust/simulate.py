"""Sampling from normal, t and Laplace mixtures of linear experts."""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .exceptions import DomainError
from .model import Dataset, Family, MoEParams, gate_probs

OUTLIER_LABEL = 0

# Two experts on x in (-1, 1): gate 1 takes over for x > 0, the expert
# lines cross at the origin with slopes +1 and -1.
TABLE1 = {
    "alpha": [[0.0, 10.0]],
    "beta": [[0.0, 1.0], [0.0, -1.0]],
    "sigma2": [0.01, 0.01],
    "nu": [5.0, 7.0],
    "lam": [0.1, 0.1],
}


def table1_params(family):
    family = Family.parse(family)
    kw = {"sigma2": TABLE1["sigma2"]}
    if family is Family.TMOE:
        kw["nu"] = TABLE1["nu"]
    elif family is Family.LMOE_SIM:
        kw = {"lam": TABLE1["lam"]}
    return MoEParams(family, TABLE1["alpha"], TABLE1["beta"], **kw)


PRESETS = {
    "table1-nmoe": lambda: table1_params(Family.NMOE),
    "table1-tmoe": lambda: table1_params(Family.TMOE),
    "table1-lmoe": lambda: table1_params(Family.LMOE_SIM),
}


@dataclass(frozen=True)
class SimSpec:
    """What to draw: ``n`` points with x ~ U(x_range), design (1, x, x^2, ...).

    Each point is replaced, with probability ``outlier_prob``, by an outlier
    whose response is ``outlier_y`` (its x draw is kept).
    """

    params: MoEParams
    n: int
    x_range: Tuple[float, float] = (-1.0, 1.0)
    outlier_prob: float = 0.0
    outlier_y: float = -2.0
    rng_seed: int = 0

    def __post_init__(self):
        if not isinstance(self.params, MoEParams):
            raise TypeError("params must be MoEParams")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        lo, hi = self.x_range
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValueError(f"bad x_range {self.x_range!r}")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ValueError("outlier_prob must lie in [0, 1]")
        if not np.isfinite(self.outlier_y):
            raise ValueError("outlier_y must be finite")

    @property
    def family(self):
        return self.params.family


@dataclass(frozen=True)
class SimResult:
    data: Dataset
    x: np.ndarray
    labels: np.ndarray  # 1..K, OUTLIER_LABEL for replaced points
    outlier_mask: np.ndarray


def gamma_draw(shape, rate, rng, size=None):
    """Gamma variates with density proportional to u^(shape-1) exp(-rate u).

    numpy's generator uses the Marsaglia-Tsang squeeze for shape >= 1 and
    the u^(1/shape) boost below that; dividing unit-rate draws by ``rate``
    makes the rate a pure scale, draw for draw.
    """
    shape_arr = np.asarray(shape, dtype=float)
    rate_arr = np.asarray(rate, dtype=float)
    for name, arr in (("shape", shape_arr), ("rate", rate_arr)):
        if not np.all(np.isfinite(arr) & (arr > 0)):
            raise DomainError(f"gamma {name} must be positive and finite")
    out = rng.standard_gamma(shape_arr, size=size) / rate_arr
    if np.ndim(out) == 0:
        return float(out)
    return out


def _design(x, cols):
    return np.vander(x, cols, increasing=True)


def simulate(spec):
    """Draw one dataset; the same SimSpec always gives the same bytes."""
    params = spec.params
    rng = np.random.default_rng(spec.rng_seed)
    n, K = int(spec.n), params.K
    x = rng.uniform(spec.x_range[0], spec.x_range[1], size=n)
    X = _design(x, params.p)
    R = _design(x, max(params.q, 1))

    pis = gate_probs(R, params) if K > 1 else np.ones((n, 1))
    u = rng.random(n)
    z = np.minimum((u[:, None] > np.cumsum(pis, axis=1)[:, :-1]).sum(axis=1), K - 1)
    mu = np.einsum("ij,ij->i", X, params.beta[z])

    if params.family is Family.NMOE:
        y = mu + np.sqrt(params.sigma2[z]) * rng.standard_normal(n)
    elif params.family is Family.TMOE:
        half = 0.5 * params.nu[z]
        w = gamma_draw(half, half, rng)
        y = mu + np.sqrt(params.sigma2[z]) * rng.standard_normal(n) / np.sqrt(w)
    else:
        # numpy's laplace sampler inverts the double-exponential CDF
        y = mu + rng.laplace(0.0, params.lam[z])

    mask = rng.random(n) < spec.outlier_prob
    y = np.where(mask, spec.outlier_y, y)
    labels = np.where(mask, OUTLIER_LABEL, z + 1)
    return SimResult(Dataset(y, X, R), x, labels, mask)
