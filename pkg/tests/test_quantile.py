import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dartok.gradcheck import central_diff, entry_rel_error, near_kink
from dartok.quantile import (
    PiecewiseDistribution,
    cdf_eval,
    quantile_jacobian,
    quantile_vjp,
    uniform_quantiles,
)

masses_st = arrays(np.float64, st.integers(1, 40), elements=st.floats(0.01, 100.0))


class TestDistribution:
    def test_rejects_bad_masses(self):
        with pytest.raises(ValueError, match="non-finite mass at bin 1"):
            PiecewiseDistribution([1.0, np.nan])
        with pytest.raises(ValueError, match="negative"):
            PiecewiseDistribution([1.0, -1.0])
        with pytest.raises(ValueError, match="positive"):
            PiecewiseDistribution([0.0, 0.0])
        with pytest.raises(ValueError):
            PiecewiseDistribution([])

    def test_cumulative(self):
        d = PiecewiseDistribution([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(d.cum, [1.0, 3.0, 6.0])
        assert d.total == 6.0 and d.n == 3


class TestCdf:
    def test_uniform(self):
        assert cdf_eval([1, 1, 1, 1], 2.5) == 2.5

    def test_skewed_by_hand(self):
        # F(x) = 3x on (0, 1]
        assert cdf_eval([3, 1], 0.5) == pytest.approx(1.5, abs=1e-15)

    def test_endpoints(self, rng):
        m = rng.uniform(0.1, 5, 9)
        assert cdf_eval(m, 0.0) == 0.0
        assert cdf_eval(m, 9.0) == pytest.approx(m.sum(), rel=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="outside"):
            cdf_eval([1, 1], 2.5)
        with pytest.raises(ValueError):
            cdf_eval([1, 1], -0.1)

    @given(masses_st, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_nondecreasing(self, m, a, b):
        n = len(m)
        lo, hi = sorted((a * n, b * n))
        assert cdf_eval(m, lo) <= cdf_eval(m, hi) + 1e-12


class TestUniformQuantiles:
    def test_uniform(self):
        np.testing.assert_array_equal(uniform_quantiles([1, 1, 1, 1], 4).points, [1.0, 2.0, 3.0])

    def test_hand_inversions(self):
        assert uniform_quantiles([3, 1], 2).points[0] == pytest.approx(2 / 3, abs=1e-15)
        assert uniform_quantiles([1, 3], 2).points[0] == pytest.approx(4 / 3, abs=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError, match="positive"):
            uniform_quantiles([0.0, 0.0], 2)
        with pytest.raises(ValueError, match="segment count"):
            uniform_quantiles([1.0, 1.0], 0)

    def test_k_one_is_empty(self):
        assert uniform_quantiles([1.0, 2.0], 1).points.shape == (0,)

    def test_tie_uses_right_bin(self):
        # t = 1 equals cum[0] exactly: the scan picks bin 1 at offset 0
        qs = uniform_quantiles([1.0, 1.0], 2)
        assert qs.bins[0] == 1 and qs.points[0] == 1.0

    @pytest.mark.parametrize("n,K", [(4, 2), (8, 4), (12, 3), (28, 14), (448, 14)])
    def test_degeneracy_exact(self, n, K):
        q = uniform_quantiles(np.full(n, 1.0 / n), K).points
        # cumulative sums of n equal floats carry ~n ulp of rounding
        np.testing.assert_allclose(q, np.arange(1, K) * n / K, rtol=1e-13, atol=0)

    @given(masses_st, st.integers(1, 20))
    def test_cdf_consistency_and_monotone(self, m, K):
        qs = uniform_quantiles(m, K)
        total = m.sum()
        for k, q in enumerate(qs.points, start=1):
            assert cdf_eval(m, q) == pytest.approx(k * total / K, rel=1e-12, abs=1e-12)
        assert np.all(np.diff(qs.points) > 0)
        assert np.all((qs.points > 0) & (qs.points < len(m)))

    @given(masses_st, st.integers(1, 12), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, m, K, c):
        np.testing.assert_allclose(
            uniform_quantiles(m * c, K).points, uniform_quantiles(m, K).points, rtol=1e-12, atol=1e-12
        )


class TestJacobian:
    def test_hand_values(self):
        jac = quantile_jacobian([3.0, 1.0], 2).matrix
        np.testing.assert_allclose(jac, [[-1 / 18, 1 / 6]], atol=1e-15)

    def test_hand_values_match_fd(self):
        m = np.array([3.0, 1.0])
        fd = central_diff(lambda: uniform_quantiles(m, 2).points, m)
        np.testing.assert_allclose(fd, [[-1 / 18, 1 / 6]], atol=1e-9)

    def test_right_of_quantile_through_total(self):
        m = np.ones(4)
        jac = quantile_jacobian(m, 4)
        # q_2 = 2 sits on a bin edge: flagged, right-segment derivative used
        assert jac.boundary_subgradient[1]
        assert jac.matrix[1, 3] == pytest.approx(0.5, abs=1e-15)
        fd = central_diff(lambda: uniform_quantiles(m, 4).points, m)
        assert fd[1, 3] == pytest.approx(0.5, abs=1e-8)

    def test_fixed_total_right_bins_zero(self, rng):
        # with the total held at 1 the targets t_k = k/K are constants; the
        # derivative is then the Jacobian minus its dt_k/dm_i = k/K part
        m = rng.uniform(0.5, 2.0, 10)
        m /= m.sum()
        K = 4
        qs = uniform_quantiles(m, K)
        frac_k = np.arange(1, K) / K
        fixed = quantile_jacobian(m, K).matrix - (frac_k / m[qs.bins])[:, None]

        def bisect_oracle():
            out = []
            for t in frac_k:
                lo, hi = 0.0, float(len(m))
                for _ in range(200):
                    mid = 0.5 * (lo + hi)
                    lo, hi = (mid, hi) if cdf_eval(m, mid) < t else (lo, mid)
                out.append(0.5 * (lo + hi))
            return np.array(out)

        np.testing.assert_allclose(bisect_oracle(), qs.points, atol=1e-12)
        fd = central_diff(bisect_oracle, m)
        np.testing.assert_allclose(fixed, fd, atol=1e-6)
        for k, j in enumerate(qs.bins):
            np.testing.assert_array_equal(fixed[k, j + 1:], 0.0)

    def test_random_against_fd(self, rng):
        checked = 0
        while checked < 30:
            n = int(rng.integers(2, 30))
            K = int(rng.integers(2, n + 1))
            m = rng.uniform(0.1, 10, n)
            if near_kink(uniform_quantiles(m, K).points):
                continue
            fd = central_diff(lambda: uniform_quantiles(m, K).points, m)
            assert entry_rel_error(quantile_jacobian(m, K).matrix, fd) <= 1e-5
            checked += 1

    def test_interior_not_flagged(self):
        assert not quantile_jacobian([3.0, 1.0], 2).flagged


class TestVjp:
    def test_unit_vector_gives_row(self, rng):
        m = rng.uniform(0.1, 3, 9)
        jac = quantile_jacobian(m, 5).matrix
        for k in range(4):
            np.testing.assert_allclose(quantile_vjp(m, 5, np.eye(4)[k]), jac[k], atol=1e-14)

    def test_zero_upstream(self, rng):
        m = rng.uniform(0.1, 3, 9)
        np.testing.assert_array_equal(quantile_vjp(m, 3, np.zeros(2)), 0.0)

    def test_dense_oracle(self, rng):
        for _ in range(20):
            m = rng.uniform(0.1, 10, 8)
            u = rng.normal(size=3)
            dense = u @ quantile_jacobian(m, 4).matrix
            np.testing.assert_allclose(quantile_vjp(m, 4, u), dense, rtol=0, atol=1e-12)

    def test_shape_check(self):
        with pytest.raises(ValueError, match="upstream"):
            quantile_vjp([1.0, 1.0, 1.0], 3, np.zeros(3))

    @settings(max_examples=50)
    @given(masses_st, st.integers(1, 10), st.integers(0, 2**31 - 1))
    def test_dense_oracle_property(self, m, K, seed):
        u = np.random.default_rng(seed).normal(size=K - 1)
        dense = u @ quantile_jacobian(m, K).matrix
        np.testing.assert_allclose(quantile_vjp(m, K, u), dense, rtol=1e-10, atol=1e-10)
