import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from nopg.kernel import (DegenerateColumnWarning, KernelModel, apply_h_factor, as_bandwidths,
                         cv_log_likelihood, gaussian_product_eval, log_kernel_matrix,
                         select_bandwidths_cv)

pos = st.floats(0.05, 5.0)


class TestGaussianProductEval:
    def test_unit_peak(self):
        np.testing.assert_allclose(gaussian_product_eval([0.0], [0.0], [1.0]), 0.3989422804, rtol=1e-10)

    def test_peak_product(self):
        h = np.array([0.3, 1.7, 2.0])
        np.testing.assert_allclose(gaussian_product_eval(np.ones(3), np.ones(3), h),
                                   np.prod(1 / np.sqrt(2 * np.pi * h**2)), rtol=1e-12)

    def test_one_bandwidth_away(self):
        h = 0.7
        np.testing.assert_allclose(gaussian_product_eval([1.0 + h], [1.0], [h]),
                                   np.exp(-0.5) / np.sqrt(2 * np.pi * h**2), rtol=1e-12)

    def test_matches_scipy_density(self):
        rng = np.random.default_rng(0)
        x, c, h = rng.normal(size=3), rng.normal(size=3), rng.uniform(0.2, 2, size=3)
        ref = np.prod(stats.norm.pdf(x, loc=c, scale=h))
        np.testing.assert_allclose(gaussian_product_eval(x, c, h), ref, rtol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gaussian_product_eval([0.0, 1.0], [0.0], [1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.lists(st.floats(-3, 3), min_size=2, max_size=2),
           st.lists(pos, min_size=2, max_size=2))
    def test_symmetric(self, x, c, h):
        assert gaussian_product_eval(x, c, h) == pytest.approx(gaussian_product_eval(c, x, h), rel=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(pos, st.floats(-2, 2))
    def test_integrates_to_one(self, h, c):
        val, _ = integrate.quad(lambda x: gaussian_product_eval([x], [c], [h]), c - 8 * h, c + 8 * h,
                                epsabs=1e-12, epsrel=1e-12)
        assert abs(val - 1.0) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.lists(pos, min_size=2, max_size=3), st.integers(0, 2), st.floats(1.01, 3.0))
    def test_peak_decreasing_in_bandwidth(self, h, k, scale):
        h = np.array(h)
        k = k % h.size
        h2 = h.copy()
        h2[k] *= scale
        c = np.zeros(h.size)
        assert gaussian_product_eval(c, c, h2) < gaussian_product_eval(c, c, h)

    def test_log_matrix_matches_pointwise(self):
        rng = np.random.default_rng(2)
        X, C, h = rng.normal(size=(4, 2)), rng.normal(size=(5, 2)), np.array([0.5, 1.5])
        L = log_kernel_matrix(X, C, h)
        ref = np.log([[gaussian_product_eval(x, c, h) for c in C] for x in X])
        np.testing.assert_allclose(L, ref, rtol=1e-12)

    def test_log_matrix_far_query_is_finite(self):
        L = log_kernel_matrix(np.array([[1e4]]), np.array([[0.0], [1.0]]), [0.1])
        assert np.all(np.isfinite(L))


class TestBandwidths:
    def test_rejects_nonpositive(self):
        for bad in ([0.0], [-1.0], [np.inf], [np.nan]):
            with pytest.raises(ValueError):
                as_bandwidths(bad)

    def test_h_factor(self):
        np.testing.assert_array_equal(apply_h_factor([1.0, 3.0], 2.0), [2.0, 6.0])
        np.testing.assert_array_equal(apply_h_factor([0.3, 0.5], 1.0), [0.3, 0.5])

    def test_pendulum_action_factor(self):
        h = np.array([0.03, 0.05])
        out = apply_h_factor(h, [1.0, 50.0])
        np.testing.assert_allclose(out, [0.03, 2.5])

    def test_h_factor_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            apply_h_factor([1.0], 0.0)

    def test_kernel_model_check(self):
        from nopg.dataset import Dataset
        d = Dataset(np.zeros((2, 2)), np.zeros((2, 1)), np.zeros(2), np.zeros((2, 2)), np.zeros(2))
        KernelModel([1.0, 1.0], [1.0], [1.0, 1.0]).check(d)
        with pytest.raises(ValueError):
            KernelModel([1.0], [1.0], [1.0]).check(d)

    def test_uniform(self):
        k = KernelModel.uniform(0.5, 2, 1)
        np.testing.assert_array_equal(k.h_next, [0.5, 0.5])


class TestCrossValidation:
    def test_gaussian_sample_near_silverman(self):
        x = np.random.default_rng(0).normal(size=2000)
        h = select_bandwidths_cv(x[:, None], folds=5, seed=0)[0]
        silverman = 1.06 * x.std() * 2000 ** -0.2
        assert silverman / 2 <= h <= 2 * silverman

    def test_matches_bruteforce_curve(self):
        x = np.random.default_rng(1).normal(size=300)
        grid = np.logspace(-2, 0.5, 15)
        h = select_bandwidths_cv(x[:, None], folds=5, grid=grid, seed=4, relative=False)[0]
        # independent held-out scores with scipy's normal density
        rng = np.random.default_rng(4)
        fold_of = np.empty(x.size, dtype=int)
        fold_of[rng.permutation(x.size)] = np.arange(x.size) % 5
        scores = []
        for g in grid:
            tot = 0.0
            for f in range(5):
                te, tr = x[fold_of == f], x[fold_of != f]
                tot += np.log(stats.norm.pdf(te[:, None], tr[None, :], g).mean(axis=1)).sum()
            scores.append(tot / x.size)
        assert h == grid[int(np.argmax(scores))]
        np.testing.assert_allclose(cv_log_likelihood(x, grid, 5, 4), scores, rtol=1e-9)

    def test_constant_column(self):
        grid = [0.1, 1.0, 3.0]
        with pytest.warns(DegenerateColumnWarning):
            h = select_bandwidths_cv(np.ones((10, 1)), folds=2, grid=grid)
        assert h[0] == 3.0

    def test_deterministic(self):
        x = np.random.default_rng(2).normal(size=(100, 2))
        np.testing.assert_array_equal(select_bandwidths_cv(x, seed=3), select_bandwidths_cv(x, seed=3))

    def test_ties_go_to_larger(self):
        # a two-point column: every sufficiently small bandwidth scores the same (-inf held-out)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            x = np.array([0.0, 0.0, 0.0, 0.0])
            h = select_bandwidths_cv(x[:, None], folds=2, grid=[0.5, 1.0])
        assert h[0] == 1.0

    def test_bad_folds(self):
        with pytest.raises(ValueError):
            select_bandwidths_cv(np.zeros((3, 1)), folds=4)
        with pytest.raises(ValueError):
            select_bandwidths_cv(np.zeros((3, 1)), folds=1)
