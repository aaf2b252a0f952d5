import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import dense_gp, random_tree
from gpframe import gp
from gpframe import kernels as kern
from gpframe.errors import (
    DimensionMismatch,
    NoConvergence,
    NonFiniteInput,
    NotPositiveDefinite,
    SizeCapExceeded,
)
from gpframe.kernels import HyperParam


def _se(variance=1.0, lengthscale=1.0, n_features=1):
    feats = [f"x{i}" for i in range(n_features)]
    return kern.SE(feats, list(range(n_features)), variance=variance, lengthscale=lengthscale)


def _eq6_model(noise=0.3, mean=None):
    expr = kern.parse_kernel_expr("Mat32(x0,x1,x2) + Mat32(x2)", ["x0", "x1", "x2"])
    expr.children[0].lengthscales[0].value = 0.8
    expr.children[1].variance.value = 0.4
    return gp.GPModel(expr, noise, mean or gp.MeanSpec())


class TestMeanSpec:
    def test_zero_constant_linear(self):
        X = np.array([[1.0, 2.0], [3.0, -1.0]])
        np.testing.assert_array_equal(gp.MeanSpec()(X), [0.0, 0.0])
        np.testing.assert_array_equal(gp.MeanSpec("constant", 2.5)(X), [2.5, 2.5])
        lin = gp.MeanSpec.linear(2, [0.5, -1.0], 3.0)
        np.testing.assert_allclose(lin(X), [1.5, 5.5])
        assert len(lin) == 3
        assert not gp.MeanSpec("zero").learnable

    def test_linear_weight_count(self):
        with pytest.raises(Exception):
            gp.MeanSpec.linear(3, [1.0, 2.0])
        with pytest.raises(DimensionMismatch):
            gp.MeanSpec.linear(3)(np.zeros((2, 2)))

    def test_dict_round_trip(self):
        m = gp.MeanSpec.linear(2, [0.1, 0.2], 0.3, learnable=False)
        back = gp.MeanSpec.from_dict(m.to_dict())
        np.testing.assert_array_equal(back.params, m.params)
        assert back.kind == "linear" and not back.learnable


class TestModel:
    def test_jitter_ladder_must_increase(self):
        with pytest.raises(ValueError):
            gp.GPModel(_se(), 1.0, jitter_ladder=(0.0, 1e-6, 1e-8))

    def test_params_round_trip(self):
        model = _eq6_model(mean=gp.MeanSpec("constant", 0.7))
        v = model.get_params()
        assert v.size == len(model.param_names()) == 6
        back = model.with_params(v + 0.1)
        np.testing.assert_allclose(back.get_params(), v + 0.1, rtol=1e-14, atol=1e-15)
        np.testing.assert_array_equal(model.get_params(), v)

    def test_dict_round_trip(self, rng):
        model = _eq6_model(mean=gp.MeanSpec.linear(3, [0.1, 0.2, 0.3], 1.0))
        back = gp.GPModel.from_dict(model.to_dict())
        X = rng.normal(size=(7, 3))
        np.testing.assert_array_equal(back.K(X), model.K(X))
        np.testing.assert_array_equal(back.get_params(), model.get_params())


class TestFitCache:
    def test_scalar_case(self):
        model = gp.GPModel(_se(), 1.0)
        cache = gp.fit_cache(model, np.array([[0.0]]), np.array([3.0]))
        np.testing.assert_allclose(cache.L, [[math.sqrt(2.0)]], rtol=1e-15)
        np.testing.assert_allclose(cache.alpha, [1.5], rtol=1e-15)
        assert cache.jitter_used == 0.0

    def test_duplicates_without_noise_need_jitter(self):
        model = gp.GPModel(_se(), HyperParam("noise", 0.0, fixed=True))
        X = np.array([[0.0], [0.0], [1.0]])
        cache = gp.fit_cache(model, X, np.array([1.0, 1.0, 0.0]))
        assert cache.jitter_used > 0

    def test_ladder_exhausted(self):
        model = gp.GPModel(_se(), HyperParam("noise", 0.0, fixed=True), jitter_ladder=(0.0,))
        with pytest.raises(NotPositiveDefinite):
            gp.fit_cache(model, np.zeros((3, 1)), np.zeros(3))

    def test_reconstruction_and_solve(self, rng):
        model = _eq6_model()
        X = rng.normal(size=(30, 3))
        y = rng.normal(size=30)
        cache = gp.fit_cache(model, X, y)
        Kn = model.K(X) + (model.noise.value + cache.jitter_used) * np.eye(30)
        err = np.linalg.norm(cache.L @ cache.L.T - Kn) / np.linalg.norm(Kn)
        assert err < 1e-10
        assert np.linalg.norm(Kn @ cache.alpha - y) < 1e-8 * np.linalg.norm(y)

    def test_size_cap(self):
        model = gp.GPModel(_se(), 1.0, max_exact=5)
        with pytest.raises(SizeCapExceeded):
            gp.fit_cache(model, np.zeros((6, 1)), np.zeros(6))

    def test_input_errors(self):
        model = gp.GPModel(_se(), 1.0)
        with pytest.raises(DimensionMismatch):
            gp.fit_cache(model, np.zeros((3, 1)), np.zeros(2))
        with pytest.raises(NonFiniteInput):
            gp.fit_cache(model, np.zeros((2, 1)), np.array([0.0, np.inf]))


class TestLogMarginalLikelihood:
    def _lml(self, y, noise):
        model = gp.GPModel(_se(), HyperParam("noise", noise, fixed=noise == 0))
        cache = gp.fit_cache(model, np.array([[0.0]]), np.array([y]))
        return gp.log_marginal_likelihood(model, cache)

    def test_scalar_noise_free(self):
        assert self._lml(0.0, 0.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
        assert self._lml(0.0, 0.0) == pytest.approx(-0.918939, abs=5e-7)

    def test_scalar_with_noise(self):
        expect = -0.25 - 0.5 * math.log(2.0) - 0.5 * math.log(2 * math.pi)
        assert self._lml(1.0, 1.0) == pytest.approx(expect, abs=1e-12)
        assert self._lml(1.0, 1.0) == pytest.approx(-1.515512, abs=5e-7)

    def test_permutation_invariance(self, rng):
        model = _eq6_model()
        X = rng.normal(size=(25, 3))
        y = rng.normal(size=25)
        p = rng.permutation(25)
        a = gp.log_marginal_likelihood(model, gp.fit_cache(model, X, y))
        b = gp.log_marginal_likelihood(model, gp.fit_cache(model, X[p], y[p]))
        assert a == pytest.approx(b, abs=1e-10)

    def test_large_noise_limit(self, rng):
        model = gp.GPModel(_se(variance=0.5, lengthscale=0.01), 1e4)
        X = np.linspace(0, 10, 20)[:, None]
        y = rng.normal(size=20)
        lml = gp.log_marginal_likelihood(model, gp.fit_cache(model, X, y))
        s2 = 1e4 + 0.5
        iid = -0.5 * np.sum(y ** 2) / s2 - 0.5 * 20 * math.log(2 * math.pi * s2)
        assert lml == pytest.approx(iid, abs=1e-6)


def _fd_lml(model, X, y, h=1e-4):
    """Five-point stencil; round-off stays near eps*|lml|/h, well below tiny gradients."""
    v = model.get_params()

    def lml(u):
        m = model.with_params(u)
        return gp.log_marginal_likelihood(m, gp.fit_cache(m, X, y))

    out = np.zeros(v.size)
    for i in range(v.size):
        e = np.zeros(v.size)
        e[i] = h
        out[i] = (-lml(v + 2 * e) + 8 * lml(v + e) - 8 * lml(v - e) + lml(v - 2 * e)) / (12 * h)
    return out


class TestGradient:
    def test_scalar_noise_gradient(self):
        model = gp.GPModel(_se(), 1.0)
        g = gp.lml_gradient(model, np.array([[0.0]]), np.array([1.0]))
        assert g[-1] == pytest.approx(-0.125, abs=1e-14)

    @pytest.mark.parametrize("mean", [gp.MeanSpec(), gp.MeanSpec("constant", 0.3),
                                      gp.MeanSpec.linear(3, [0.2, -0.1, 0.4], 0.5)])
    def test_finite_differences_eq6_kernel(self, mean, rng):
        model = _eq6_model(mean=mean)
        X = rng.normal(size=(20, 3))
        y = rng.normal(size=20)
        g = gp.lml_gradient(model, X, y)
        fd = _fd_lml(model, X, y)
        rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-4)
        assert rel.max() < 1e-5

    @given(st.integers(0, 2**32 - 1))
    def test_finite_differences_random_kernels(self, seed):
        rng = np.random.default_rng(seed)
        model = gp.GPModel(random_tree(rng), math.exp(rng.uniform(-2, 0)))
        X = rng.normal(size=(15, 3))
        y = rng.normal(size=15)
        g = gp.lml_gradient(model, X, y)
        fd = _fd_lml(model, X, y)
        rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-4)
        assert rel.max() < 1e-5

    def test_constant_mean_gradient_zero_at_fit(self, rng):
        model = gp.GPModel(_se(), 0.5, gp.MeanSpec("constant", 2.0))
        X = rng.normal(size=(10, 1))
        g = gp.lml_gradient(model, X, np.full(10, 2.0))
        assert g[2] == 0.0


class TestPredict:
    def test_scalar_case(self):
        model = gp.GPModel(_se(), 1.0)
        cache = gp.fit_cache(model, np.array([[0.0]]), np.array([1.0]))
        pr = gp.predict(model, cache, np.array([[0.0]]))
        assert pr.mean[0] == pytest.approx(0.5, abs=1e-15)
        assert pr.latent_variance[0] == pytest.approx(0.5, abs=1e-15)
        assert pr.observation_variance[0] == pytest.approx(1.5, abs=1e-15)

    def test_noise_free_interpolation(self, rng):
        model = gp.GPModel(_se(), HyperParam("noise", 0.0, fixed=True))
        X = np.sort(rng.uniform(0, 10, 12))[:, None]
        y = np.sin(X[:, 0])
        pr = gp.predict(model, gp.fit_cache(model, X, y), X)
        np.testing.assert_allclose(pr.mean, y, atol=1e-8)
        assert pr.latent_variance.max() <= 1e-10

    def test_reversion_to_prior(self, rng):
        model = gp.GPModel(_se(variance=2.0), 0.1, gp.MeanSpec("constant", 3.0))
        X = rng.normal(size=(10, 1))
        cache = gp.fit_cache(model, X, rng.normal(size=10))
        pr = gp.predict(model, cache, np.array([[1e3]]))
        assert abs(pr.mean[0] - 3.0) < 1e-6
        assert abs(pr.latent_variance[0] - 2.0) < 1e-6

    def test_dimension_mismatch(self):
        model = gp.GPModel(_se(), 1.0)
        cache = gp.fit_cache(model, np.zeros((2, 1)), np.zeros(2))
        with pytest.raises(DimensionMismatch):
            gp.predict(model, cache, np.zeros((1, 2)))

    def test_blocks_match_full(self, rng):
        model = _eq6_model()
        X = rng.normal(size=(20, 3))
        cache = gp.fit_cache(model, X, rng.normal(size=20))
        Xs = rng.normal(size=(2 * gp._PREDICT_BLOCK + 5, 3))
        pr = gp.predict(model, cache, Xs)
        part = gp.predict(model, cache, Xs[-5:])
        np.testing.assert_array_equal(pr.mean[-5:], part.mean)
        np.testing.assert_array_equal(pr.latent_variance[-5:], part.latent_variance)

    @given(st.integers(0, 2**32 - 1))
    def test_dense_inverse_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        model = gp.GPModel(random_tree(rng), math.exp(rng.uniform(-3, 0)), gp.MeanSpec("constant", 0.4))
        n = int(rng.integers(1, 60))
        X, Xs = rng.normal(size=(n, 3)), rng.normal(size=(7, 3))
        y = rng.normal(size=n)
        cache = gp.fit_cache(model, X, y)
        pr = gp.predict(model, cache, Xs)
        mu, var, lml = dense_gp(model.K(X), model.K(X, Xs), model.K(Xs), y, model.noise.value, 0.4, 0.4)
        np.testing.assert_allclose(pr.mean, mu, atol=1e-8)
        np.testing.assert_allclose(pr.latent_variance, np.maximum(var, 0), atol=1e-8)
        assert gp.log_marginal_likelihood(model, cache) == pytest.approx(lml, abs=1e-8)

    @given(st.integers(0, 2**32 - 1))
    def test_variance_bounded_by_prior(self, seed):
        rng = np.random.default_rng(seed)
        model = gp.GPModel(random_tree(rng), math.exp(rng.uniform(-6, 0)))
        X, Xs = rng.normal(size=(25, 3)), rng.normal(size=(10, 3))
        pr = gp.predict(model, gp.fit_cache(model, X, rng.normal(size=25)), Xs)
        assert np.all(pr.latent_variance >= 0)
        assert np.all(pr.latent_variance <= model.kdiag(Xs) + 1e-8)
        assert np.all(pr.observation_variance >= pr.latent_variance)

    @given(st.integers(0, 2**32 - 1))
    def test_more_data_never_increases_variance(self, seed):
        rng = np.random.default_rng(seed)
        model = gp.GPModel(random_tree(rng), math.exp(rng.uniform(-4, 0)))
        n = int(rng.integers(2, 30))
        X, Xs = rng.normal(size=(n, 3)), rng.normal(size=(6, 3))
        y = rng.normal(size=n)
        small = gp.predict(model, gp.fit_cache(model, X[:-1], y[:-1]), Xs)
        big = gp.predict(model, gp.fit_cache(model, X, y), Xs)
        assert np.all(big.latent_variance <= small.latent_variance + 1e-9)

    def test_clamped_count(self):
        model = gp.GPModel(_se(lengthscale=0.3), HyperParam("noise", 0.0, fixed=True), jitter_ladder=(0.0,))
        X = np.linspace(0, 1, 8)[:, None]
        cache = gp.fit_cache(model, X, np.zeros(8))
        pr = gp.predict(model, cache, X)
        assert 0 < pr.n_clamped <= int(np.sum(pr.latent_variance == 0))
        assert np.all(pr.latent_variance >= 0)


class TestSampling:
    def test_empty(self):
        out = gp.sample(gp.GPModel(_se(), 1.0), np.zeros((4, 1)), 0, seed=1)
        assert out.shape == (0, 4)

    def test_determinism(self, rng):
        model = _eq6_model()
        X = rng.normal(size=(8, 3))
        np.testing.assert_array_equal(gp.sample(model, X, 3, seed=5), gp.sample(model, X, 3, seed=5))
        assert not np.array_equal(gp.sample(model, X, 3, seed=5), gp.sample(model, X, 3, seed=6))

    def test_prior_moments(self, rng):
        model = gp.GPModel(_se(variance=1.5), 1.0)
        X = rng.normal(size=(5, 1))
        S = gp.sample(model, X, 50_000, seed=3)
        assert np.all(np.abs(S[:10_000].mean(axis=0)) < 4 * math.sqrt(1.5 / 10_000))
        K = model.K(X)
        C = np.cov(S.T)
        assert np.linalg.norm(C - K) / np.linalg.norm(K) < 0.05

    def test_posterior_moments(self, rng):
        model = gp.GPModel(_se(), 0.2)
        X = rng.normal(size=(6, 1))
        cache = gp.fit_cache(model, X, rng.normal(size=6))
        Xs = np.array([[0.1], [2.5]])
        pr = gp.predict(model, cache, Xs)
        S = gp.sample(model, Xs, 10_000, seed=9, condition=cache)
        se = np.sqrt(pr.latent_variance / 10_000)
        assert np.all(np.abs(S.mean(axis=0) - pr.mean) < 4 * se)

    def test_synthetic_noise_level(self):
        model = gp.GPModel(_se(lengthscale=0.3), 0.1)
        X = np.linspace(0, 3, 2000)[:, None]
        resid = []
        for seed in range(5):
            y, f = gp.generate_synthetic(model, X, seed, return_latent=True)
            resid.append(y - f)
        assert abs(np.var(np.concatenate(resid)) / 0.1 - 1) < 0.05

    def test_synthetic_noise_free_and_deterministic(self, rng):
        model = gp.GPModel(_se(), HyperParam("noise", 0.0, fixed=True))
        X = rng.normal(size=(10, 1))
        y, f = gp.generate_synthetic(model, X, 4, return_latent=True)
        np.testing.assert_array_equal(y, f)
        np.testing.assert_array_equal(gp.generate_synthetic(model, X, 4), y)


class TestConjugateGradient:
    def test_identity(self):
        b = np.arange(1.0, 6.0)
        x, it = gp.solve_cg(np.eye(5), b)
        np.testing.assert_allclose(x, b)
        assert it == 1

    def test_matches_dense_solve(self, rng):
        model = _eq6_model()
        X = rng.normal(size=(100, 3))
        A = model.K(X) + model.noise.value * np.eye(100)
        b = rng.normal(size=100)
        x, _ = gp.solve_cg(A, b, tol=1e-12)
        ref = np.linalg.solve(A, b)
        assert np.linalg.norm(x - ref) / np.linalg.norm(ref) < 1e-6
        assert np.linalg.norm(A @ x - b) <= 1e-12 * np.linalg.norm(b)

    def test_no_convergence(self):
        with pytest.raises(NoConvergence):
            gp.solve_cg(np.eye(3), np.ones(3), max_iter=0)
