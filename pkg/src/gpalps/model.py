"""The gated linear mixing model.

Each of ``m`` latent GPs is multiplied by a Bernoulli gate and mixed into
``p`` outputs through a Gaussian random matrix:

    x_j ~ GP(0, k_j),  b_j ~ Bern(theta_j),  H_ij ~ N(0, s_ij)
    y_i(t) ~ N(sum_j H_ij b_j x_j(t), sigma_i^2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelSpec, gram
from .linalg import chol_jitter


@dataclass(frozen=True)
class ModelSpec:
    """Prior of the gated mixing model.

    ``theta`` entries equal to exactly 0 or 1 pin the corresponding gate;
    both inference engines honour this.
    """

    kernels: tuple[KernelSpec, ...]
    theta: np.ndarray
    prior_var: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        kernels = tuple(self.kernels)
        m = len(kernels)
        theta = np.broadcast_to(np.asarray(self.theta, dtype=float), (m,)).copy()
        noise = np.atleast_1d(np.asarray(self.noise, dtype=float)).copy()
        p = noise.size
        s = np.broadcast_to(np.asarray(self.prior_var, dtype=float), (p, m)).copy()
        if m == 0:
            raise ValueError("need at least one latent process")
        if np.any(theta < 0) or np.any(theta > 1) or not np.all(np.isfinite(theta)):
            raise ValueError("gate priors must lie in [0, 1]")
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise ValueError("mixing prior variances must be positive")
        if np.any(noise <= 0) or not np.all(np.isfinite(noise)):
            raise ValueError("noise variances must be positive")
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "prior_var", s)
        object.__setattr__(self, "noise", noise)

    @property
    def m(self):
        return len(self.kernels)

    @property
    def p(self):
        return self.noise.size

    @property
    def pinned(self):
        """Boolean mask of gates fixed by a degenerate prior."""
        return (self.theta == 0.0) | (self.theta == 1.0)

    @classmethod
    def default(cls, kernels, p, noise=0.1):
        """Neutral prior: theta = 1/2, unit mixing variances."""
        kernels = tuple(kernels)
        return cls(kernels, 0.5, 1.0, np.full(p, noise))

    def replace(self, **changes):
        fields = {"kernels": self.kernels, "theta": self.theta,
                  "prior_var": self.prior_var, "noise": self.noise}
        fields.update(changes)
        return ModelSpec(**fields)

    def to_dict(self):
        return {"kernels": [k.to_dict() for k in self.kernels],
                "theta": self.theta.tolist(), "prior_var": self.prior_var.tolist(),
                "noise": self.noise.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(KernelSpec.from_dict(k) for k in d["kernels"]),
                   d.get("theta", 0.5), d.get("prior_var", 1.0), d["noise"])


@dataclass
class Dataset:
    """Inputs ``t`` (n or n x d) and outputs ``Y`` (p x n).

    ``test_index`` marks the first test point; everything before it is
    training data.
    """

    t: np.ndarray
    Y: np.ndarray
    test_index: int | None = None
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if self.t.shape[0] < 1:
            raise ValueError("dataset needs at least one point")
        if self.Y.shape[1] != self.t.shape[0]:
            raise ValueError(f"Y has {self.Y.shape[1]} columns but there are {self.t.shape[0]} inputs")
        if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.Y))):
            raise ValueError("dataset contains non-finite values")

    @property
    def n(self):
        return self.t.shape[0]

    @property
    def p(self):
        return self.Y.shape[0]

    def train(self):
        if self.test_index is None:
            return self
        return Dataset(self.t[: self.test_index], self.Y[:, : self.test_index], None, self.names)

    def test(self):
        if self.test_index is None:
            return None
        return Dataset(self.t[self.test_index:], self.Y[:, self.test_index:], None, self.names)


@dataclass
class LatentDraw:
    X: np.ndarray
    H: np.ndarray
    b: np.ndarray

    @property
    def F(self):
        return mix(self.H, self.b, self.X)


def mix(H, b, X):
    """Noise-free outputs ``H (x(t) o b)`` for all t, shape p x n."""
    return (H * b) @ X


def sample_latents(spec: ModelSpec, t, rng: np.random.Generator, size=None):
    """Draw each latent process from its GP prior on ``t``.

    Returns an m x n array, or size x m x n when ``size`` is given.
    """
    t = np.asarray(t, dtype=float)
    n = t.shape[0]
    draws = []
    for k in spec.kernels:
        L, _ = chol_jitter(gram(k, t))
        if size is None:
            draws.append(L @ rng.standard_normal(n))
        else:
            draws.append((L @ rng.standard_normal((n, size))).T)
    return np.stack(draws, axis=-2)


def sample_prior(spec: ModelSpec, t, rng: np.random.Generator):
    """Forward-sample the generative model on inputs ``t``.

    Returns
    -------
    LatentDraw, Y
    """
    X = sample_latents(spec, t, rng)
    b = (rng.random(spec.m) < spec.theta).astype(float)
    H = rng.standard_normal((spec.p, spec.m)) * np.sqrt(spec.prior_var)
    F = mix(H, b, X)
    Y = F + rng.standard_normal(F.shape) * np.sqrt(spec.noise)[:, None]
    return LatentDraw(X, H, b), Y


def log_likelihood(Y, X, H, b, spec_or_noise):
    """``sum_i sum_t log N(y_it; sum_k H_ik b_k X_kt, sigma_i^2)``.

    ``b`` may be binary or relaxed. The last argument is a ModelSpec or a
    vector of noise variances.
    """
    noise = spec_or_noise.noise if isinstance(spec_or_noise, ModelSpec) else np.asarray(spec_or_noise)
    Y = np.atleast_2d(Y)
    resid = Y - mix(H, b, X)
    n = Y.shape[1]
    return float(-0.5 * n * np.sum(np.log(2 * math.pi * noise))
                 - np.sum(resid**2 / (2.0 * noise[:, None])))


def predict(sampler, t_star, noise, n_samples=256, rng=None):
    """Monte-Carlo predictive moments of the outputs at ``t_star``.

    Parameters
    ----------
    sampler
        ``sampler(t_star, rng) -> (H, b, X_star)`` returning one posterior draw.
    noise
        Observation-noise variances added to the predictive variance.

    Returns
    -------
    mean, variance
        Arrays of shape p x len(t_star).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    draws = []
    for _ in range(n_samples):
        H, b, X = sampler(t_star, rng)
        draws.append(mix(np.asarray(H), np.asarray(b), np.asarray(X)))
    draws = np.stack(draws)
    return draws.mean(0), draws.var(0) + np.asarray(noise, dtype=float)[:, None]
