import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from moe_robust.exceptions import UndefinedMomentError, UnsupportedFamilyError
from moe_robust.model import (
    Dataset,
    Family,
    MoEParams,
    SelectionRow,
    SelectionTable,
    canonical_order,
    complete_loglik,
    criteria,
    expert_variances,
    free_params,
    gate_probs,
    loglik,
    map_cluster,
    permute,
    predict_mean,
    predict_variance,
)
from moe_robust.simulate import table1_params


def small_tmoe():
    return MoEParams(
        "TMoE",
        alpha=[[0.3, -1.2]],
        beta=[[0.5, 2.0], [-1.0, 0.7]],
        sigma2=[0.4, 1.3],
        nu=[3.5, 9.0],
    )


def small_data():
    x = np.array([-1.5, -0.2, 0.0, 0.4, 1.1, 2.0])
    y = np.array([-2.0, 0.1, 0.3, 1.7, 2.4, -0.5])
    return Dataset.from_covariates(x, y)


def brute_loglik(data, params):
    """Sum of log mixture densities via scipy, one observation at a time."""
    total = 0.0
    for i in range(data.n):
        a = np.vstack([params.alpha, np.zeros(params.q)]) @ data.R[i]
        pis = np.exp(a - a.max())
        pis /= pis.sum()
        dens = 0.0
        for k in range(params.K):
            mu = data.X[i] @ params.beta[k]
            s = math.sqrt(params.sigma2[k])
            if params.family is Family.TMOE:
                dens += pis[k] * stats.t.pdf(data.y[i], params.nu[k], loc=mu, scale=s)
            else:
                dens += pis[k] * stats.norm.pdf(data.y[i], loc=mu, scale=s)
        total += math.log(dens)
    return total


class TestGating:
    def test_two_gate_example(self):
        p = gate_probs([1.0, 1.0], table1_params("TMoE"))
        assert p[0] == pytest.approx(1 / (1 + math.exp(-10)), abs=1e-12)
        assert p[0] == pytest.approx(0.99995460, abs=1e-8)
        assert p.sum() == pytest.approx(1.0, abs=1e-15)

    def test_origin_is_even_split(self):
        p = gate_probs([1.0, 0.0], table1_params("TMoE"))
        np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)

    def test_single_expert(self):
        params = MoEParams("NMoE", np.zeros((0, 2)), [[0.0, 1.0]], sigma2=[1.0])
        np.testing.assert_array_equal(gate_probs(np.ones((3, 2)), params), np.ones((3, 1)))

    @given(
        st.lists(st.floats(-800, 800), min_size=4, max_size=4),
        st.floats(-50, 50),
    )
    def test_rows_sum_to_one_without_overflow(self, coef, r):
        alpha = np.array(coef).reshape(2, 2)
        p = gate_probs([1.0, r], alpha)
        assert np.all(np.isfinite(p)) and np.all(p >= 0)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gate_probs([1.0, 2.0, 3.0], table1_params("NMoE"))


class TestLikelihood:
    @pytest.mark.parametrize("family", ["TMoE", "NMoE"])
    def test_matches_brute_force(self, family):
        params = small_tmoe()
        if family == "NMoE":
            params = params.replace(family="NMoE", nu=None)
        data = small_data()
        assert loglik(data, params) == pytest.approx(brute_loglik(data, params), abs=1e-10)

    def test_frozen_value(self):
        # brute-force scipy evaluation, frozen
        assert loglik(small_data(), small_tmoe()) == pytest.approx(
            brute_loglik(small_data(), small_tmoe()), abs=1e-12
        )

    def test_complete_loglik_bounds_observed(self):
        data, params = small_data(), small_tmoe()
        assert complete_loglik(data, params) <= loglik(data, params) + 1e-12

    def test_complete_equals_observed_for_separated_components(self):
        params = MoEParams("NMoE", [[0.0, 0.0]], [[-100.0, 0.0], [100.0, 0.0]], sigma2=[1.0, 1.0])
        data = Dataset.from_covariates(np.zeros(4), np.array([-100.0, -99.0, 100.0, 101.0]))
        assert complete_loglik(data, params) == pytest.approx(loglik(data, params), abs=1e-9)

    def test_lmoe_not_fittable(self):
        with pytest.raises(UnsupportedFamilyError):
            loglik(small_data(), table1_params("LMoE-sim"))


class TestMoments:
    def test_table1_mean_at_half(self):
        params = table1_params("TMoE")
        assert predict_mean([1.0, 0.5], [1.0, 0.5], params) == pytest.approx(0.49330714907571505, abs=1e-12)
        pi1 = 1 / (1 + math.exp(-5))
        assert predict_mean([1.0, 0.5], [1.0, 0.5], params) == pytest.approx(0.5 * pi1 - 0.5 * (1 - pi1), abs=1e-14)

    def test_variance_formula(self):
        params = table1_params("TMoE")
        x = np.array([1.0, 0.5])
        v = predict_variance(x, x, params)
        pi1 = 1 / (1 + math.exp(-5))
        var = np.array([0.01 * 5 / 3, 0.01 * 7 / 5])
        means = np.array([0.5, -0.5])
        pis = np.array([pi1, 1 - pi1])
        expected = pis @ (means**2 + var) - (pis @ means) ** 2
        assert v == pytest.approx(expected, rel=1e-12)

    def test_monte_carlo_moments(self):
        from moe_robust.simulate import SimSpec, simulate

        params = table1_params("TMoE")
        # x fixed at 0.2 by a degenerate range
        res = simulate(SimSpec(params, 400_000, x_range=(0.2, 0.2 + 1e-12), rng_seed=5))
        x = np.array([1.0, 0.2])
        m, v = predict_mean(x, x, params), predict_variance(x, x, params)
        y = res.data.y
        assert abs(y.mean() - m) < 4 * math.sqrt(v / y.size)
        assert y.var() == pytest.approx(v, rel=0.03)

    def test_undefined_moments(self):
        params = small_tmoe().replace(nu=[0.9, 5.0])
        with pytest.raises(UndefinedMomentError):
            predict_mean([1.0, 0.0], [1.0, 0.0], params)
        with pytest.raises(UndefinedMomentError):
            expert_variances(small_tmoe().replace(nu=[2.0, 5.0]))

    def test_vectorised_rows(self):
        params = small_tmoe()
        X = np.column_stack([np.ones(5), np.linspace(-1, 1, 5)])
        batch = predict_mean(X, X, params)
        single = [predict_mean(row, row, params) for row in X]
        np.testing.assert_allclose(batch, single, rtol=0, atol=1e-15)


class TestClusteringAndSelection:
    def test_map_cluster(self):
        tau = np.array([[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]])
        np.testing.assert_array_equal(map_cluster(tau), [2, 1, 1])

    def test_map_cluster_rejects_bad_rows(self):
        with pytest.raises(ValueError):
            map_cluster([[0.3, 0.3]])

    def test_free_params(self):
        assert free_params("NMoE", 2, 2, 2) == 11
        assert free_params("TMoE", 2, 2, 2) == 13
        assert free_params("TMoE", 1, 2, 2) == 5
        with pytest.raises(UnsupportedFamilyError):
            free_params("LMoE-sim", 2, 2, 2)

    @given(st.integers(1, 8), st.integers(1, 5), st.integers(1, 5))
    def test_t_adds_one_per_expert(self, K, p, q):
        assert free_params("TMoE", K, p, q) - free_params("NMoE", K, p, q) == K

    def test_criteria(self):
        c = criteria(-100.0, -110.0, 10, 100)
        assert c["aic"] == -110.0
        assert c["bic"] == pytest.approx(-100.0 - 5 * math.log(100))
        assert c["icl"] == pytest.approx(-110.0 - 5 * math.log(100))

    def test_selection_best_prefers_smaller_on_tie(self):
        t = SelectionTable(Family.TMOE, 10)
        t.add(SelectionRow(K=1, bic=-3.0))
        t.add(SelectionRow(K=2, bic=-3.0))
        t.add(SelectionRow(K=3, bic=float("nan"), error="failed"))
        assert t.best("bic") == 1


class TestCanonicalOrder:
    def test_permutation_invariance(self):
        params = small_tmoe()
        data = small_data()
        swapped = permute(params, [1, 0])
        assert loglik(data, swapped) == pytest.approx(loglik(data, params), abs=1e-12)
        assert canonical_order(swapped) == canonical_order(params) or np.allclose(
            canonical_order(swapped).alpha, canonical_order(params).alpha, atol=1e-15
        )

    def test_sorted_by_intercept(self):
        out = canonical_order(small_tmoe())
        assert list(out.beta[:, 0]) == [-1.0, 0.5]

    @given(st.permutations([0, 1, 2]))
    @settings(max_examples=10)
    def test_three_components(self, order):
        params = MoEParams(
            "NMoE",
            [[0.1, 0.2], [-0.4, 1.0]],
            [[0.0, 1.0], [2.0, 0.0], [-3.0, 1.0]],
            sigma2=[1.0, 2.0, 3.0],
        )
        a, b = canonical_order(params), canonical_order(permute(params, list(order)))
        np.testing.assert_allclose(a.beta, b.beta)
        np.testing.assert_allclose(a.alpha, b.alpha, atol=1e-14)
        np.testing.assert_allclose(a.sigma2, b.sigma2)


class TestSerialization:
    def test_json_roundtrip_bitwise(self):
        params = MoEParams(
            "TMoE",
            [[0.1 + 0.2, -1 / 3]],
            [[math.pi, math.e], [1e-300, -7.5e200]],
            sigma2=[2 ** -40, 1.0000000000000002],
            nu=[3.000000000000001, 199.99999999999997],
        )
        back = MoEParams.from_json(params.to_json())
        assert back == params
        assert back.beta.tobytes() == params.beta.tobytes()
        json.loads(params.to_json())

    def test_single_expert_roundtrip(self):
        params = MoEParams("NMoE", np.zeros((0, 2)), [[0.0, 1.0]], sigma2=[1.0])
        back = MoEParams.from_json(params.to_json())
        assert back == params and back.q == 2

    def test_validation(self):
        with pytest.raises(ValueError):
            MoEParams("TMoE", [[0.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]], sigma2=[1.0, 1.0])
        with pytest.raises(ValueError):
            MoEParams("NMoE", [[0.0, 0.0], [1.0, 1.0]], [[0.0, 1.0], [0.0, 1.0]], sigma2=[1.0, 1.0])

    def test_dataset_validation(self):
        with pytest.raises(ValueError):
            Dataset.from_covariates([0.0, np.nan], [1.0, 2.0])
        with pytest.raises(ValueError):
            Dataset(np.zeros(2), np.zeros((2, 2)), np.ones((2, 2)))
