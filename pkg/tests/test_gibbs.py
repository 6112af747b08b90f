"""Gibbs sampler conditionals, chain bookkeeping and the Geweke test."""

import itertools
import math

import numpy as np
import pytest

from gpalps.gibbs import (
    ChainConfig,
    gate_probability,
    gate_statistic,
    geweke_test,
    h_posterior_moments,
    latent_grams,
    log_joint,
    read_chain_csv,
    run_chain,
    sample_b,
    sample_h,
    sample_x,
    x_posterior_moments,
)
from gpalps.kernels import KernelSpec, gram
from gpalps.model import Dataset, ModelSpec, log_likelihood, mix


def random_instance(seed, m=3, p=2, n=5):
    rng = np.random.default_rng(seed)
    kernels = [KernelSpec.rbf(rng.uniform(0.5, 2.0)) for _ in range(m)]
    spec = ModelSpec(kernels, rng.uniform(0.05, 0.95, m), rng.uniform(0.5, 2.0, (p, m)),
                     rng.uniform(0.1, 1.0, p))
    t = np.sort(rng.uniform(0, 5, n))
    return spec, t, rng.normal(size=(p, n)), rng.normal(size=(m, n)), rng.normal(size=(p, m)), \
        rng.integers(0, 2, m).astype(float), rng


def enumerated_conditional(Y, X, H, b, spec, j):
    """p(b_j = 1 | rest) by brute force over all 2^m gate vectors."""
    m = spec.m
    logp = {}
    for bits in itertools.product([0.0, 1.0], repeat=m):
        bb = np.array(bits)
        logp[bits] = log_likelihood(Y, X, H, bb, spec) + np.sum(
            np.where(bb > 0, np.log(spec.theta), np.log1p(-spec.theta)))
    on, off = b.copy(), b.copy()
    on[j], off[j] = 1.0, 0.0
    a, c = logp[tuple(on)], logp[tuple(off)]
    return 1.0 / (1.0 + math.exp(c - a))


def dense_x_posterior(Y, H, b, spec, t):
    """Precision-form Bayesian linear regression over vec(X) (row-major)."""
    m, n = spec.m, len(t)
    K = np.zeros((m * n, m * n))
    for j, k in enumerate(spec.kernels):
        K[j * n:(j + 1) * n, j * n:(j + 1) * n] = gram(k, t)
    Hb = np.kron(H * b, np.eye(n))
    Sb_inv = np.diag(np.repeat(1.0 / spec.noise, n))
    S = np.linalg.inv(np.linalg.inv(K) + Hb.T @ Sb_inv @ Hb)
    return (S @ Hb.T @ Sb_inv @ Y.ravel()).reshape(m, n), S


def dense_h_posterior(Y, X, b, spec):
    means, covs = [], []
    Xb = X * b[:, None]
    for i in range(Y.shape[0]):
        S = np.linalg.inv(np.diag(1.0 / spec.prior_var[i]) + Xb @ Xb.T / spec.noise[i])
        means.append(S @ Xb @ Y[i] / spec.noise[i])
        covs.append(S)
    return np.array(means), np.array(covs)


class TestGateConditional:
    def test_no_information(self):
        assert gate_probability(0.0, 0.3) == pytest.approx(0.3, abs=1e-15)

    def test_log_three(self):
        assert gate_probability(math.log(3), 0.5) == pytest.approx(0.75, abs=1e-15)

    def test_zero_column_gives_zero_statistic(self):
        spec, t, Y, X, H, b, _ = random_instance(0)
        H[:, 1] = 0.0
        assert gate_statistic(Y, X, H, b, spec, 1) == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_enumeration_oracle(self, seed):
        spec, t, Y, X, H, b, _ = random_instance(seed, m=3, p=2, n=5)
        for j in range(spec.m):
            c = gate_statistic(Y, X, H, b, spec, j)
            assert gate_probability(c, spec.theta[j]) == pytest.approx(
                enumerated_conditional(Y, X, H, b, spec, j), abs=1e-10)

    def test_sweep_is_sequential(self):
        spec, t, Y, X, H, b, rng = random_instance(1)
        out = sample_b(Y, X, H, spec, b, np.random.default_rng(0), order=[2, 0, 1])
        assert set(np.unique(out)) <= {0.0, 1.0}
        # replaying with the same uniforms reproduces the draw
        r = np.random.default_rng(0)
        bb = b.copy()
        for j in [2, 0, 1]:
            bb[j] = float(r.random() < gate_probability(gate_statistic(Y, X, H, bb, spec, j), spec.theta[j]))
        np.testing.assert_array_equal(out, bb)


class TestLatentConditional:
    @pytest.mark.parametrize("seed", range(10))
    def test_dense_oracle(self, seed):
        spec, t, Y, X, H, b, _ = random_instance(seed, m=2, p=2, n=4)
        b = np.array([1.0, float(seed % 2)])
        mean, cov = x_posterior_moments(Y, H, b, spec, latent_grams(spec, t))
        dm, dc = dense_x_posterior(Y, H, b, spec, t)
        np.testing.assert_allclose(mean, dm, atol=1e-8)
        np.testing.assert_allclose(cov, dc, atol=1e-8)

    def test_sampler_matches_moments(self):
        spec, t, Y, X, H, b, rng = random_instance(3, m=2, p=2, n=4)
        b = np.ones(2)
        grams = latent_grams(spec, t)
        mean, cov = x_posterior_moments(Y, H, b, spec, grams)
        draws = np.array([sample_x(Y, H, b, spec, grams, rng).ravel() for _ in range(20_000)])
        se = np.sqrt(np.diag(cov) / len(draws))
        assert np.all(np.abs(draws.mean(0) - mean.ravel()) < 4.5 * se)
        np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.05 * np.max(np.abs(cov)))

    def test_gates_off_gives_prior(self):
        kernel = KernelSpec.rbf(1.0)
        spec = ModelSpec([kernel], 0.5, 1.0, [0.1])
        t = np.array([0.0, 0.4, 1.1, 2.0])
        grams = latent_grams(spec, t)
        rng = np.random.default_rng(0)
        Y = np.ones((1, 4))
        draws = np.array([sample_x(Y, np.ones((1, 1)), np.zeros(1), spec, grams, rng)[0] for _ in range(10_000)])
        K = gram(kernel, t)
        assert np.all(np.abs(draws.mean(0)) < 4 * np.sqrt(np.diag(K) / 10_000))
        np.testing.assert_allclose(np.cov(draws.T), K, atol=0.05)

    def test_noiseless_interpolation(self):
        kernels = [KernelSpec.rbf(1.0), KernelSpec.rbf(2.0)]
        spec = ModelSpec(kernels, 0.5, 1.0, [1e-9, 1e-9])
        t = np.linspace(0, 3, 4)
        Y = np.random.default_rng(1).normal(size=(2, 4))
        mean, _ = x_posterior_moments(Y, np.eye(2), np.ones(2), spec, latent_grams(spec, t))
        np.testing.assert_allclose(mean, Y, atol=1e-5)

    def test_rank_deficient_kernel(self):
        spec = ModelSpec([KernelSpec.cosine(0.05)], 1.0, 1.0, [0.1])
        t = np.linspace(0, 40, 30)
        X = sample_x(np.ones((1, 30)), np.ones((1, 1)), np.ones(1), spec, latent_grams(spec, t),
                     np.random.default_rng(0))
        assert np.all(np.isfinite(X))


class TestMixingConditional:
    @pytest.mark.parametrize("seed", range(10))
    def test_dense_oracle(self, seed):
        spec, t, Y, X, H, b, _ = random_instance(seed, m=3, p=2, n=5)
        mean, cov = h_posterior_moments(Y, X, b, spec)
        dm, dc = dense_h_posterior(Y, X, b, spec)
        np.testing.assert_allclose(mean, dm, atol=1e-8)
        np.testing.assert_allclose(cov, dc, atol=1e-8)

    def test_gates_off_gives_prior(self):
        spec, t, Y, X, H, b, rng = random_instance(2, m=2, p=2, n=5)
        draws = np.array([sample_h(Y, X, np.zeros(2), spec, rng) for _ in range(20_000)])
        np.testing.assert_allclose(draws.var(0), spec.prior_var, rtol=0.05)
        assert np.all(np.abs(draws.mean(0)) < 4 * np.sqrt(spec.prior_var / 20_000))

    def test_least_squares_limit(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 5000))
        y = 1.7 * x + 0.3 * rng.normal(size=(1, 5000))
        spec = ModelSpec([KernelSpec.rbf()], 0.5, 1.0, [0.09])
        mean, _ = h_posterior_moments(y, x, np.ones(1), spec)
        ols = float(x[0] @ y[0] / (x[0] @ x[0]))
        assert mean[0, 0] == pytest.approx(ols, rel=1e-3)

    def test_sampler_matches_moments(self):
        spec, t, Y, X, H, b, rng = random_instance(5, m=2, p=1, n=6)
        b = np.ones(2)
        mean, cov = h_posterior_moments(Y, X, b, spec)
        draws = np.array([sample_h(Y, X, b, spec, rng)[0] for _ in range(20_000)])
        assert np.all(np.abs(draws.mean(0) - mean[0]) < 4 * np.sqrt(np.diag(cov[0]) / 20_000))
        np.testing.assert_allclose(np.cov(draws.T), cov[0], atol=0.05 * np.max(np.abs(cov[0])))


def _chain_data(seed, n=15):
    kernels = [KernelSpec.rbf(1.0), KernelSpec.cosine(0.25)]
    spec = ModelSpec(kernels, 0.5, 1.0, [0.05])
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 8, n)
    X = np.stack([np.linalg.cholesky(gram(k, t) + 1e-8 * np.eye(n)) @ rng.normal(size=n) for k in kernels])
    Y = mix(np.array([[1.5, 1.5]]), np.array([1.0, 0.0]), X) + math.sqrt(0.05) * rng.normal(size=(1, n))
    return spec, Dataset(t, Y)


class TestChain:
    def test_deterministic(self):
        spec, data = _chain_data(0)
        config = ChainConfig(iterations=60, burn_in=10, seed=4)
        a, b = run_chain(data, spec, config), run_chain(data, spec, config)
        for sa, sb in zip(a.samples, b.samples):
            np.testing.assert_array_equal(sa.H, sb.H)
            np.testing.assert_array_equal(sa.b, sb.b)

    def test_bookkeeping(self):
        spec, data = _chain_data(1)
        config = ChainConfig(iterations=50, burn_in=10, thinning=4, keep_latents=True)
        result = run_chain(data, spec, config)
        assert len(result.samples) == 10
        assert all(set(np.unique(s.b)) <= {0.0, 1.0} for s in result.samples)
        np.testing.assert_allclose(result.activation_frequency, np.mean([s.b for s in result.samples], 0))
        assert all(np.isfinite(s.log_joint) for s in result.samples)
        assert result.samples[0].X.shape == (2, data.n)
        assert len(result.table()) == spec.m

    def test_csv_roundtrip(self, tmp_path):
        spec, data = _chain_data(2)
        path = tmp_path / "chain.csv"
        result = run_chain(data, spec, ChainConfig(iterations=40, burn_in=5), csv_path=path)
        iters, gates, summaries = read_chain_csv(path)
        assert len(iters) == len(result.samples) and iters[0] == 5
        np.testing.assert_array_equal(gates, [s.b for s in result.samples])
        np.testing.assert_allclose(summaries[:, 0], [s.log_joint for s in result.samples])

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            ChainConfig(iterations=10, burn_in=10)
        with pytest.raises(ValueError):
            ChainConfig(thinning=0)
        with pytest.raises(ValueError):
            ChainConfig(sweep="backwards")

    def test_random_sweep(self):
        spec, data = _chain_data(3)
        result = run_chain(data, spec, ChainConfig(iterations=30, burn_in=5, sweep="random"))
        assert np.all(np.isfinite(result.F_mean))

    def test_active_latent_preferred(self):
        wins = 0
        for seed in range(20):
            spec, data = _chain_data(100 + seed)
            freq = run_chain(data, spec, ChainConfig(iterations=300, burn_in=100, seed=seed)).activation_frequency
            wins += freq[0] > freq[1]
        assert wins >= 19

    def test_log_joint_finite_after_each_block(self):
        spec, t, Y, X, H, b, rng = random_instance(8)
        grams = latent_grams(spec, t)
        for _ in range(20):
            X = sample_x(Y, H, b, spec, grams, rng)
            assert np.isfinite(log_joint(Y, X, H, b, spec, grams))
            H = sample_h(Y, X, b, spec, rng)
            assert np.isfinite(log_joint(Y, X, H, b, spec, grams))
            b = sample_b(Y, X, H, spec, b, rng)
            assert np.isfinite(log_joint(Y, X, H, b, spec, grams))


class TestGeweke:
    def test_forward_vs_successive_conditional(self):
        spec = ModelSpec([KernelSpec.rbf(1.0), KernelSpec.rbf(0.5)], [0.3, 0.6], 1.0, [0.5])
        z = geweke_test(spec, np.array([0.0, 0.7, 1.5]), n_forward=20_000, n_chain=20_000, seed=1)
        assert np.max(np.abs(z)) < 4.0
