"""Gibbs sampler for the exact posterior p(X, H, b | Y).

Because the outputs are bilinear in H and X, both block conditionals are
Bayesian linear regressions, and each gate has a two-point conditional.
One sweep updates X, then H, then every gate in turn.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .kernels import gram
from .linalg import chol_jitter, chol_solve, logdet_from_chol, solve_tril
from .model import Dataset, ModelSpec, log_likelihood, mix


@dataclass
class GibbsState:
    X: np.ndarray | None
    H: np.ndarray
    b: np.ndarray
    log_joint: float = float("nan")


@dataclass
class ChainConfig:
    iterations: int = 2000
    burn_in: int = 500
    thinning: int = 1
    seed: int = 0
    sweep: str = "ascending"
    keep_latents: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.thinning < 1:
            raise ValueError("thinning must be at least 1")
        if self.sweep not in ("ascending", "random"):
            raise ValueError("sweep must be 'ascending' or 'random'")


@dataclass
class LatentGram:
    K: np.ndarray
    L: np.ndarray
    jitter: float


class LatentGrams(list):
    """List of :class:`LatentGram` with the stacked (m x n x n) arrays cached."""

    def __init__(self, items):
        super().__init__(items)
        self.K = np.stack([g.K for g in self])
        self.L = np.stack([g.L for g in self])


def latent_grams(spec: ModelSpec, t):
    """Prior Gram matrix and jittered Cholesky factor for every latent."""
    out = []
    for k in spec.kernels:
        K = gram(k, t)
        L, jitter = chol_jitter(K)
        out.append(LatentGram(K, L, jitter))
    return LatentGrams(out)


def _stack_K(grams):
    return grams.K if isinstance(grams, LatentGrams) else np.stack([g.K for g in grams])


def _prior_draw(grams, rng, n):
    L = grams.L if isinstance(grams, LatentGrams) else np.stack([g.L for g in grams])
    return np.matmul(L, rng.standard_normal((L.shape[0], n))[:, :, None])[:, :, 0]


def _output_cov(Hb, K, noise):
    """Covariance of vec(Y) (row-major, p*n) given H o b: sum_j Hb_ij Hb_kj K_j + noise."""
    p, n = Hb.shape[0], K.shape[-1]
    W = Hb[:, None, :] * Hb[None, :, :]
    C = np.tensordot(W, K, axes=(2, 0)).transpose(0, 2, 1, 3).reshape(p * n, p * n)
    C[np.diag_indices_from(C)] += np.repeat(noise, n)
    return C


def _correction(K, Hb, alpha):
    """Rows K_j sum_i Hb_ij alpha_i, i.e. the Cov(X, Y) C^{-1} residual product."""
    return np.matmul(K, (Hb.T @ alpha)[:, :, None])[:, :, 0]


def x_posterior_moments(Y, H, b, spec: ModelSpec, grams):
    """Mean (m x n) and covariance (mn x mn, row-major blocks) of p(X | Y, H, b)."""
    Y = np.atleast_2d(Y)
    K = _stack_K(grams)
    m, n = K.shape[0], K.shape[-1]
    Hb = H * b
    L, _ = chol_jitter(_output_cov(Hb, K, spec.noise))
    alpha = chol_solve(L, Y.ravel()).reshape(Y.shape)
    mean = _correction(K, Hb, alpha)
    # cross-covariance Cov(x, y): block (j, i) = Hb_ij K_j
    G = np.einsum("jab,ij->jaib", K, Hb).reshape(m * n, -1)
    V = solve_tril(L, G.T)
    Kfull = np.zeros((m * n, m * n))
    for j in range(m):
        Kfull[j * n:(j + 1) * n, j * n:(j + 1) * n] = K[j]
    return mean, Kfull - V.T @ V


def sample_x(Y, H, b, spec: ModelSpec, grams, rng):
    """Exact draw from p(X | Y, H, b) by pathwise conditioning.

    A joint prior draw (X0, E) is corrected by ``K H_b^T C^{-1}(Y - H_b X0 - E)``
    where C is the p*n output covariance, so only a p*n Cholesky is needed and
    singular latent kernels are fine.
    """
    Y = np.atleast_2d(Y)
    K = _stack_K(grams)
    n = K.shape[-1]
    X0 = _prior_draw(grams, rng, n)
    E = rng.standard_normal(Y.shape) * np.sqrt(spec.noise)[:, None]
    Hb = H * b
    if not np.any(Hb):
        return X0
    L, _ = chol_jitter(_output_cov(Hb, K, spec.noise))
    alpha = chol_solve(L, (Y - Hb @ X0 - E).ravel()).reshape(Y.shape)
    return X0 + _correction(K, Hb, alpha)


def h_posterior_moments(Y, X, b, spec: ModelSpec):
    """Per-output posterior means (p x m) and covariances (p x m x m) of H."""
    Y = np.atleast_2d(Y)
    Xb = X * b[:, None]
    G = Xb @ Xb.T
    means, covs = [], []
    for i in range(Y.shape[0]):
        P = np.diag(1.0 / spec.prior_var[i]) + G / spec.noise[i]
        L, _ = chol_jitter(P)
        means.append(chol_solve(L, Xb @ Y[i] / spec.noise[i]))
        covs.append(chol_solve(L, np.eye(len(b))))
    return np.array(means), np.array(covs)


def sample_h(Y, X, b, spec: ModelSpec, rng):
    """Draw H row by row from its Gaussian conditional."""
    Y = np.atleast_2d(Y)
    Xb = X * b[:, None]
    G = Xb @ Xb.T
    m = X.shape[0]
    H = np.empty((Y.shape[0], m))
    for i in range(Y.shape[0]):
        P = np.diag(1.0 / spec.prior_var[i]) + G / spec.noise[i]
        L, _ = chol_jitter(P)
        mean = chol_solve(L, Xb @ Y[i] / spec.noise[i])
        H[i] = mean + solve_tril(L, rng.standard_normal(m), transpose=True)
    return H


def gate_statistic(Y, X, H, b, spec: ModelSpec, j, XX=None, XY=None):
    """Change in log-likelihood from switching gate ``j`` on (c_j)."""
    Y = np.atleast_2d(Y)
    XX = X @ X.T if XX is None else XX
    XY = X @ Y.T if XY is None else XY
    h = H[:, j]
    others = b.copy()
    others[j] = 0.0
    cross = 2.0 * h * (H @ (others * XX[j]))
    quad = h**2 * XX[j, j]
    data = 2.0 * h * XY[j]
    return -0.5 * np.sum((cross + quad - data) / spec.noise)


def gate_probability(c, theta):
    """p(b_j = 1 | rest) = theta e^c / (theta e^c + 1 - theta)."""
    with np.errstate(divide="ignore"):
        return float(expit(np.log(theta) - np.log1p(-theta) + c))


def sample_b(Y, X, H, spec: ModelSpec, b, rng, order=None):
    """Sequential sweep over the gates; each draw sees the latest values."""
    Y = np.atleast_2d(Y)
    b = np.array(b, dtype=float)
    XX = X @ X.T
    XY = X @ Y.T
    order = range(len(b)) if order is None else order
    for j in order:
        c = gate_statistic(Y, X, H, b, spec, j, XX, XY)
        b[j] = float(rng.random() < gate_probability(c, spec.theta[j]))
    return b


def log_joint(Y, X, H, b, spec: ModelSpec, grams):
    """log p(Y, X, H, b) with the (jittered) latent priors."""
    value = log_likelihood(Y, X, H, b, spec)
    n = X.shape[1]
    for j, g in enumerate(grams):
        a = solve_tril(g.L, X[j])
        value += -0.5 * a @ a - 0.5 * logdet_from_chol(g.L) - 0.5 * n * math.log(2 * math.pi)
    value += float(np.sum(-0.5 * np.log(2 * math.pi * spec.prior_var) - H**2 / (2 * spec.prior_var)))
    with np.errstate(divide="ignore"):
        value += float(np.sum(np.where(b > 0.5, np.log(spec.theta), np.log1p(-spec.theta))))
    return value


@dataclass
class ChainResult:
    samples: list
    activation_frequency: np.ndarray
    H_mean: np.ndarray
    H_var: np.ndarray
    X_mean: np.ndarray
    X_var: np.ndarray
    F_mean: np.ndarray
    F_var: np.ndarray
    config: ChainConfig = field(default_factory=ChainConfig)

    def table(self):
        return [{"latent": j, "frequency": float(f)} for j, f in enumerate(self.activation_frequency)]


CSV_SUMMARY = ("log_joint", "mean_abs_h", "rmse")


def _csv_header(m):
    return ["iteration"] + [f"b{j}" for j in range(m)] + list(CSV_SUMMARY)


def read_chain_csv(path):
    """Parse a chain CSV back into (iterations, gates, summaries)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in r] for r in reader]
    m = sum(1 for h in header if h.startswith("b") and h[1:].isdigit())
    arr = np.array(rows).reshape(-1, len(header))
    return arr[:, 0].astype(int), arr[:, 1:1 + m], arr[:, 1 + m:]


def initial_state(Y, spec: ModelSpec, grams, rng):
    """All free gates on, H from its prior, X from its conditional."""
    b = np.where(spec.pinned, spec.theta, 1.0)
    H = rng.standard_normal((spec.p, spec.m)) * np.sqrt(spec.prior_var)
    X = sample_x(Y, H, b, spec, grams, rng)
    return GibbsState(X, H, b)


def gibbs_sweep(Y, state: GibbsState, spec: ModelSpec, grams, rng, sweep="ascending"):
    X = sample_x(Y, state.H, state.b, spec, grams, rng)
    H = sample_h(Y, X, state.b, spec, rng)
    order = rng.permutation(spec.m) if sweep == "random" else None
    b = sample_b(Y, X, H, spec, state.b, rng, order)
    return GibbsState(X, H, b)


def run_chain(dataset: Dataset, spec: ModelSpec, config: ChainConfig, csv_path=None, init=None):
    """Run the sampler, discard burn-in and summarise the retained states.

    Retained states keep X only when ``config.keep_latents`` is set; the
    moments of X and of the noise-free outputs are accumulated regardless.
    """
    Y = dataset.Y
    rng = np.random.default_rng(config.seed)
    grams = latent_grams(spec, dataset.t)
    state = initial_state(Y, spec, grams, rng) if init is None else init
    samples = []
    acc = {k: 0.0 for k in ("b", "H", "H2", "X", "X2", "F", "F2")}
    count = 0
    fh = open(csv_path, "w", newline="") if csv_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(_csv_header(spec.m))
    try:
        for it in range(config.iterations):
            try:
                state = gibbs_sweep(Y, state, spec, grams, rng, config.sweep)
            except np.linalg.LinAlgError as err:
                raise np.linalg.LinAlgError(f"factorisation failed at iteration {it}: {err}") from err
            if it < config.burn_in or (it - config.burn_in) % config.thinning:
                continue
            state.log_joint = log_joint(Y, state.X, state.H, state.b, spec, grams)
            F = mix(state.H, state.b, state.X)
            acc["b"] += state.b
            acc["H"] += state.H
            acc["H2"] += state.H**2
            acc["X"] += state.X
            acc["X2"] += state.X**2
            acc["F"] += F
            acc["F2"] += F**2
            count += 1
            samples.append(GibbsState(state.X.copy() if config.keep_latents else None,
                                      state.H.copy(), state.b.copy(), state.log_joint))
            if writer:
                rmse = float(np.sqrt(np.mean((Y - F) ** 2)))
                writer.writerow([it] + [int(v) for v in state.b]
                                + [repr(float(state.log_joint)), repr(float(np.mean(np.abs(state.H)))), repr(rmse)])
    finally:
        if fh:
            fh.close()
    mean = {k: v / count for k, v in acc.items()}
    return ChainResult(
        samples=samples,
        activation_frequency=mean["b"],
        H_mean=mean["H"], H_var=mean["H2"] - mean["H"] ** 2,
        X_mean=mean["X"], X_var=mean["X2"] - mean["X"] ** 2,
        F_mean=mean["F"], F_var=np.maximum(mean["F2"] - mean["F"] ** 2, 0.0),
        config=config,
    )


def _batch_se(values, n_batches=50):
    values = np.asarray(values, dtype=float)
    k = max(1, min(n_batches, len(values) // 2))
    trimmed = values[: (len(values) // k) * k].reshape(k, -1, *values.shape[1:])
    means = trimmed.mean(1)
    return means.std(0, ddof=1) / math.sqrt(k)


def _geweke_stats(X, H, b, Y):
    F = mix(H, b, X)
    return np.concatenate([b, H.ravel(), (H * b).ravel(), (H**2).ravel(), (X**2).mean(1),
                           (F**2).ravel(), (Y**2).ravel()])


def geweke_test(spec: ModelSpec, t, n_forward=20000, n_chain=20000, seed=0, burn_in=100):
    """Joint-distribution test of the sampler.

    Compares moments of marginal-conditional (forward) draws with those of a
    successive-conditional chain that alternates Y | X, H, b with one Gibbs
    sweep. Returns z-scores per test function; standard errors of the chain
    use batch means.
    """
    rng = np.random.default_rng(seed)
    grams = latent_grams(spec, t)
    forward = []
    for _ in range(n_forward):
        X = np.stack([g.L @ rng.standard_normal(len(t)) for g in grams])
        b = (rng.random(spec.m) < spec.theta).astype(float)
        H = rng.standard_normal((spec.p, spec.m)) * np.sqrt(spec.prior_var)
        Y = mix(H, b, X) + rng.standard_normal((spec.p, len(t))) * np.sqrt(spec.noise)[:, None]
        forward.append(_geweke_stats(X, H, b, Y))
    forward = np.array(forward)

    X = np.stack([g.L @ rng.standard_normal(len(t)) for g in grams])
    b = (rng.random(spec.m) < spec.theta).astype(float)
    H = rng.standard_normal((spec.p, spec.m)) * np.sqrt(spec.prior_var)
    state = GibbsState(X, H, b)
    chain = []
    for it in range(n_chain + burn_in):
        Y = mix(state.H, state.b, state.X) + rng.standard_normal((spec.p, len(t))) * np.sqrt(spec.noise)[:, None]
        state = gibbs_sweep(Y, state, spec, grams, rng)
        if it >= burn_in:
            chain.append(_geweke_stats(state.X, state.H, state.b, Y))
    chain = np.array(chain)
    se_f = forward.std(0, ddof=1) / math.sqrt(len(forward))
    se_c = _batch_se(chain)
    denom = np.sqrt(se_f**2 + se_c**2)
    z = np.where(denom > 0, (forward.mean(0) - chain.mean(0)) / np.where(denom > 0, denom, 1.0), 0.0)
    return z
