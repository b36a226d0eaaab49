import math

import numpy as np
import pytest
from scipy import stats

from moe_robust.exceptions import DomainError
from moe_robust.model import MoEParams, gate_probs
from moe_robust.simulate import OUTLIER_LABEL, PRESETS, SimSpec, gamma_draw, simulate, table1_params


class TestGammaDraw:
    def test_unit_exponential(self):
        rng = np.random.default_rng(0)
        u = gamma_draw(1.0, 1.0, rng, size=100_000)
        assert abs(u.mean() - 1.0) < 3 * 1.0 / math.sqrt(u.size)

    @pytest.mark.parametrize("shape,rate", [(2.5, 2.5), (0.3, 0.3), (7.0, 2.0)])
    def test_moments(self, shape, rate):
        rng = np.random.default_rng(1)
        u = gamma_draw(shape, rate, rng, size=100_000)
        sd = math.sqrt(shape) / rate
        assert abs(u.mean() - shape / rate) < 3 * sd / math.sqrt(u.size)
        assert u.var() == pytest.approx(shape / rate**2, rel=0.03)

    def test_matches_scipy_law(self):
        u = gamma_draw(2.5, 2.5, np.random.default_rng(2), size=20_000)
        assert stats.kstest(u, stats.gamma(2.5, scale=1 / 2.5).cdf).pvalue > 0.01

    def test_rate_is_a_pure_scale(self):
        a = gamma_draw(3.0, 1.0, np.random.default_rng(5), size=50)
        b = gamma_draw(3.0, 4.0, np.random.default_rng(5), size=50)
        np.testing.assert_allclose(b, a / 4.0, rtol=1e-15)

    @pytest.mark.parametrize("shape,rate", [(0.0, 1.0), (1.0, -2.0), (float("nan"), 1.0)])
    def test_invalid(self, shape, rate):
        with pytest.raises(DomainError):
            gamma_draw(shape, rate, np.random.default_rng(0))


class TestSimulate:
    def test_normal_limit_indistinguishable(self):
        t = table1_params("TMoE").replace(nu=[1e8, 1e8])
        a = simulate(SimSpec(t, 10_000, rng_seed=1)).data.y
        b = simulate(SimSpec(table1_params("NMoE"), 10_000, rng_seed=2)).data.y
        ks = stats.ks_2samp(a, b).statistic
        crit = 1.63 * math.sqrt(2 / 10_000)  # two-sample 1% level
        assert ks < crit

    def test_all_outliers(self):
        res = simulate(SimSpec(table1_params("TMoE"), 200, outlier_prob=1.0, rng_seed=3))
        assert np.all(res.data.y == -2.0)
        assert np.all(res.labels == OUTLIER_LABEL) and res.outlier_mask.all()

    def test_no_outliers(self):
        res = simulate(SimSpec(table1_params("NMoE"), 500, rng_seed=3))
        assert not res.outlier_mask.any()
        assert set(np.unique(res.labels)) <= {1, 2}

    def test_outlier_count_is_binomial(self):
        c, n = 0.05, 20_000
        res = simulate(SimSpec(table1_params("NMoE"), n, outlier_prob=c, rng_seed=4))
        assert abs(res.outlier_mask.sum() - c * n) < 4 * math.sqrt(n * c * (1 - c))

    def test_t5_residual_moments(self):
        params = table1_params("TMoE")
        res = simulate(SimSpec(params, 10_000, rng_seed=6))
        sel = res.labels == 1
        z = (res.data.y[sel] - res.data.X[sel] @ params.beta[0]) / math.sqrt(params.sigma2[0])
        assert abs(z.mean()) < 4 * math.sqrt(5 / 3 / sel.sum())
        assert z.var() == pytest.approx(5 / 3, rel=0.05)

    def test_gate_frequencies(self):
        params = table1_params("NMoE").replace(alpha=[[0.0, 1.5]])
        n, x0 = 100_000, 0.4
        res = simulate(SimSpec(params, n, x_range=(x0, x0 + 1e-12), rng_seed=7))
        p = gate_probs([1.0, x0], params)[0]
        freq = np.mean(res.labels == 1)
        assert abs(freq - p) < 3 * math.sqrt(p * (1 - p) / n)

    def test_laplace_experts(self):
        params = table1_params("LMoE-sim")
        res = simulate(SimSpec(params, 20_000, rng_seed=8))
        sel = res.labels == 2
        resid = res.data.y[sel] - res.data.X[sel] @ params.beta[1]
        assert stats.kstest(resid, stats.laplace(scale=0.1).cdf).pvalue > 0.001

    def test_bit_exact_repeat(self):
        spec = SimSpec(table1_params("TMoE"), 1000, outlier_prob=0.03, rng_seed=42)
        a, b = simulate(spec), simulate(spec)
        assert a.data.y.tobytes() == b.data.y.tobytes()
        assert a.x.tobytes() == b.x.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_outliers_do_not_shift_clean_draws(self):
        params = table1_params("TMoE")
        clean = simulate(SimSpec(params, 500, rng_seed=9))
        dirty = simulate(SimSpec(params, 500, outlier_prob=0.1, rng_seed=9))
        keep = ~dirty.outlier_mask
        np.testing.assert_array_equal(clean.data.y[keep], dirty.data.y[keep])
        np.testing.assert_array_equal(clean.x, dirty.x)

    def test_design_columns(self):
        params = MoEParams("NMoE", [[0.0, 1.0, 0.5]], [[0, 1, 2, 3], [1, 0, 0, 0]], sigma2=[1, 1])
        res = simulate(SimSpec(params, 20, rng_seed=1))
        np.testing.assert_allclose(res.data.X[:, 3], res.x**3)
        assert res.data.R.shape == (20, 3)

    def test_presets(self):
        for name, make in PRESETS.items():
            assert make().K == 2

    @pytest.mark.parametrize(
        "kw", [dict(n=0), dict(outlier_prob=1.5), dict(x_range=(1.0, -1.0)), dict(outlier_y=float("inf"))]
    )
    def test_invalid_spec(self, kw):
        args = dict(params=table1_params("NMoE"), n=10)
        args.update(kw)
        with pytest.raises(ValueError):
            SimSpec(**args)
