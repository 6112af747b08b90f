"""Sparse variational inference for the gated mixing model.

The approximate posterior is ``p(X | X^z) q(X^z) q(H) q(b)`` with a full
Gaussian per latent over the inducing values, a factorised Gaussian over
the mixing matrix and independent binary-concrete gates. The ELBO is

    ell + kl_z + kl_h + kl_b

(each ``kl_*`` already negated), where ``ell`` and ``kl_b`` are
reparametrised Monte-Carlo estimates and the Gaussian KLs are closed form.
Gradients come from torch autograd in float64.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import expit

from .concrete import PRIOR_TEMPERATURE, anneal_temperature, concrete_log_density_logit, concrete_logit
from .kernels import gram, stacked_diag, stacked_gram
from .linalg import chol_jitter, gram_bundle, kl_mvn_chol, logdet_from_chol, solve_tril
from .model import Dataset, ModelSpec

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_FORMAT = "gpalps-vi-checkpoint"


class NumericalError(FloatingPointError):
    """Non-finite value in an ELBO term or gradient."""

    def __init__(self, message, term=None, iteration=None):
        super().__init__(message)
        self.term = term
        self.iteration = iteration


def _softplus_inv(x):
    x = np.asarray(x, dtype=float)
    return np.where(x > 30.0, x, np.log(np.expm1(np.minimum(x, 30.0))))


def _sigmoid(x):
    return expit(np.asarray(x, dtype=float))


@dataclass
class VIConfig:
    """Optimisation settings; the defaults are used when the caller is silent."""

    iterations: int = 2000
    batch_size: int | None = None
    learning_rate: float = 1e-2
    mc_samples: int = 8
    seed: int = 0
    n_inducing: int = 10
    learn_inducing: bool = True
    learn_noise: bool = True
    jitter_floor: float = 1e-3
    init_qz_scale: float = 0.1
    init_qh_var: float = 0.1
    init_qh_mean_std: float = 0.1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.n_inducing < 1:
            raise ValueError("need at least one inducing point")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class VariationalState:
    """Free parameters of the variational posterior.

    ``qz_chol`` holds lower-triangular Cholesky factors of the inducing
    covariances (positive diagonal); ``qh_var`` holds variances directly.
    """

    inducing: np.ndarray
    qz_mean: np.ndarray
    qz_chol: np.ndarray
    qh_mean: np.ndarray
    qh_var: np.ndarray
    gate_logits: np.ndarray
    noise_log_var: np.ndarray
    iteration: int = 0
    total_iterations: int = 1
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inducing.shape[0] < 1:
            raise ValueError("need at least one inducing location")
        diag = np.diagonal(self.qz_chol, axis1=-2, axis2=-1)
        if np.any(diag <= 0):
            raise ValueError("inducing covariance factors need a positive diagonal")
        if np.any(self.qh_var <= 0):
            raise ValueError("mixing variances must be positive")

    @property
    def m(self):
        return self.qz_mean.shape[0]

    @property
    def n_inducing(self):
        return self.inducing.shape[0]

    @property
    def rho(self):
        return _sigmoid(self.gate_logits)

    @property
    def noise(self):
        return np.exp(self.noise_log_var)

    @property
    def temperature(self):
        return anneal_temperature(min(self.iteration, self.total_iterations), self.total_iterations)

    @property
    def qz_cov(self):
        return self.qz_chol @ np.swapaxes(self.qz_chol, -1, -2)

    _ARRAYS = ("inducing", "qz_mean", "qz_chol", "qh_mean", "qh_var", "gate_logits", "noise_log_var")

    def copy(self):
        return VariationalState(**{k: np.array(getattr(self, k)) for k in self._ARRAYS},
                                iteration=self.iteration, total_iterations=self.total_iterations,
                                config=dict(self.config))

    def to_dict(self):
        arrays = {}
        for name in self._ARRAYS:
            a = np.asarray(getattr(self, name), dtype=float)
            arrays[name] = {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}
        return {"format": CHECKPOINT_FORMAT, "version": 1, "iteration": self.iteration,
                "total_iterations": self.total_iterations, "config": self.config, "arrays": arrays}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a variational checkpoint")
        arrays = {name: np.asarray(v["data"], dtype=float).reshape(v["shape"])
                  for name, v in d["arrays"].items()}
        return cls(**arrays, iteration=int(d["iteration"]),
                   total_iterations=int(d["total_iterations"]), config=dict(d.get("config", {})))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ElboBreakdown:
    ell: float
    kl_z: float
    kl_h: float
    kl_b: float
    total: float

    def as_row(self):
        return [self.ell, self.kl_z, self.kl_h, self.kl_b, self.total]


def _initial_inducing(t, n_inducing, rng):
    t = np.asarray(t, dtype=float)
    if t.ndim == 1:
        return np.linspace(t.min(), t.max(), n_inducing)
    idx = rng.choice(t.shape[0], size=min(n_inducing, t.shape[0]), replace=False)
    return t[np.sort(idx)].copy()


def init_state(spec: ModelSpec, dataset: Dataset, config: VIConfig | None = None, rng=None):
    """Neutral starting point for :func:`fit`.

    Inducing means at zero, covariances at a tenth of the prior, small random
    mixing means, gates undecided (rho = 1/2) and inducing inputs spread over
    the data.
    """
    config = config or VIConfig()
    rng = np.random.default_rng(config.seed) if rng is None else rng
    tz = _initial_inducing(dataset.t, config.n_inducing, rng)
    ell = tz.shape[0]
    chols = []
    for k in spec.kernels:
        L, _ = chol_jitter(config.init_qz_scale * gram(k, tz), floor=config.init_qz_scale * config.jitter_floor)
        chols.append(L)
    qh_mean = config.init_qh_mean_std * rng.standard_normal((spec.p, spec.m))
    return VariationalState(
        inducing=tz,
        qz_mean=np.zeros((spec.m, ell)),
        qz_chol=np.stack(chols),
        qh_mean=qh_mean,
        qh_var=np.full((spec.p, spec.m), config.init_qh_var),
        gate_logits=np.zeros(spec.m),
        noise_log_var=np.log(spec.noise),
        iteration=0,
        total_iterations=config.iterations,
        config=asdict(config),
    )


def activation_probabilities(state: VariationalState, spec: ModelSpec | None = None):
    """Posterior gate probabilities rho, strictly inside (0, 1).

    With ``spec`` given, gates pinned by a degenerate prior report theta.
    """
    if spec is None:
        return state.rho
    return np.where(spec.pinned, spec.theta, state.rho)


# -- parameter packing -------------------------------------------------------

PARAM_NAMES = ("inducing", "qz_mean", "qz_raw", "qh_mean", "qh_logvar", "gate_logits", "noise_logvar")


def state_to_params(state: VariationalState):
    raw = np.array(state.qz_chol)
    idx = np.arange(state.n_inducing)
    raw[:, idx, idx] = _softplus_inv(state.qz_chol[:, idx, idx])
    values = {
        "inducing": state.inducing,
        "qz_mean": state.qz_mean,
        "qz_raw": raw,
        "qh_mean": state.qh_mean,
        "qh_logvar": np.log(state.qh_var),
        "gate_logits": state.gate_logits,
        "noise_logvar": state.noise_log_var,
    }
    return {k: torch.tensor(np.array(v, dtype=float), dtype=DTYPE) for k, v in values.items()}


def _chol_from_raw(raw):
    diag = F.softplus(torch.diagonal(raw, dim1=-2, dim2=-1))
    return torch.tril(raw, -1) + torch.diag_embed(diag)


def params_to_state(params, template: VariationalState):
    with torch.no_grad():
        out = template.copy()
        out.inducing = params["inducing"].numpy().copy()
        out.qz_mean = params["qz_mean"].numpy().copy()
        out.qz_chol = _chol_from_raw(params["qz_raw"]).numpy().copy()
        out.qh_mean = params["qh_mean"].numpy().copy()
        out.qh_var = torch.exp(params["qh_logvar"]).numpy().copy()
        out.gate_logits = params["gate_logits"].numpy().copy()
        out.noise_log_var = params["noise_logvar"].numpy().copy()
    return out


# -- marginals of q(X) -----------------------------------------------------


def _marginal(K_cz, k_diag, L_zz, mean, L_q):
    """Per-point mean and variance of one latent under q(X_j).

    ``A = K_cz K_zz^{-1}`` is never formed explicitly: with
    ``W = L_zz^{-1} K_zc`` and ``A^T = L_zz^{-T} W`` we get
    ``Ktilde_tt = k_tt - ||W_t||^2`` and ``A_t^T S A_t = ||L_q^T A_t||^2``.
    """
    W = solve_tril(L_zz, K_cz.T)
    A_T = solve_tril(L_zz, W, transpose=True)
    d = A_T.T @ mean
    v = k_diag - (W**2).sum(0) + ((L_q.T @ A_T) ** 2).sum(0)
    return d, v


def marginal_qx(state: VariationalState, grams, batch=None):
    """Gaussian marginals of q(x_t) at the data points.

    Parameters
    ----------
    grams
        One :class:`GramBundle` per latent, built on the data inputs and
        ``state.inducing`` (``K_cc`` may be the full matrix or its diagonal).
    batch
        Optional indices into the data points.

    Returns
    -------
    means, variances
        Arrays of shape (len(batch), m).
    """
    means, variances = [], []
    for j, g in enumerate(grams):
        K_cz = np.asarray(g.K_cz)
        k_diag = np.asarray(g.K_cc)
        if k_diag.ndim == 2:
            k_diag = np.diag(k_diag)
        if batch is not None:
            K_cz, k_diag = K_cz[batch], k_diag[batch]
        d, v = _marginal(K_cz, k_diag, np.asarray(g.chol_K_zz), state.qz_mean[j], state.qz_chol[j])
        means.append(d)
        variances.append(v)
    return np.stack(means, axis=1), np.stack(variances, axis=1)


# -- ELBO ------------------------------------------------------------------


@dataclass
class ElboNoise:
    """Standard-normal / uniform draws behind one ELBO estimate.

    ``eps_x`` has one row per data point so different batches can share
    draws.
    """

    eps_h: np.ndarray
    u_b: np.ndarray
    eps_x: np.ndarray

    @classmethod
    def draw(cls, rng, mc_samples, p, m, n):
        return cls(rng.standard_normal((mc_samples, p, m)),
                   rng.random((mc_samples, m)),
                   rng.standard_normal((mc_samples, n, m)))


def _as_tensor(x):
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def _elbo_terms(params, spec: ModelSpec, t_batch, Y_batch, n_total, noise: ElboNoise, temperature,
                fixed_mixing=None, jitter_floor=0.0):
    """Torch ELBO terms for one batch; ``noise.eps_x`` rows align with the batch."""
    tz = params["inducing"]
    L_q = _chol_from_raw(params["qz_raw"])
    K_zz = stacked_gram(spec.kernels, tz)
    L_zz, _ = chol_jitter(K_zz, floor=jitter_floor, check=False)
    K_cz = stacked_gram(spec.kernels, t_batch, tz)
    # batched form of _marginal: W = L^-1 K_zc, A^T = L^-T W
    W = solve_tril(L_zz, K_cz.transpose(-1, -2))
    A_T = solve_tril(L_zz, W, transpose=True)
    d = (A_T * params["qz_mean"][:, :, None]).sum(1).T
    var = (stacked_diag(spec.kernels, t_batch) - (W**2).sum(1)
           + ((L_q.transpose(-1, -2) @ A_T) ** 2).sum(1)).T
    var = var.clamp_min(1e-12)

    S = noise.eps_h.shape[0]
    eps_x = _as_tensor(noise.eps_x)
    x = d + var.sqrt() * eps_x  # S x B x m

    if fixed_mixing is None:
        qh_var = torch.exp(params["qh_logvar"])
        H = params["qh_mean"] + qh_var.sqrt() * _as_tensor(noise.eps_h)  # S x p x m
        prior_var = _as_tensor(spec.prior_var)
        kl_h = -(0.5 * torch.log(prior_var / qh_var)
                 + (qh_var + params["qh_mean"] ** 2) / (2.0 * prior_var) - 0.5).sum()
    else:
        H = _as_tensor(fixed_mixing).expand(S, spec.p, spec.m)
        kl_h = torch.zeros((), dtype=DTYPE)

    pinned = torch.as_tensor(spec.pinned)
    logits = params["gate_logits"]
    y_gate = concrete_logit(logits, temperature, _as_tensor(noise.u_b))  # S x m
    b = torch.where(pinned, _as_tensor(spec.theta), torch.sigmoid(y_gate))
    free = ~pinned
    if bool(free.any()):
        theta = spec.theta[~spec.pinned]
        prior_logit = _as_tensor(np.log(theta) - np.log1p(-theta))
        yf = y_gate[:, free]
        log_p = concrete_log_density_logit(yf, prior_logit, PRIOR_TEMPERATURE)
        log_q = concrete_log_density_logit(yf, logits[free], temperature)
        kl_b = (log_p - log_q).sum(-1).mean()
    else:
        kl_b = torch.zeros((), dtype=DTYPE)

    F_ = torch.einsum("spm,sbm->sbp", H * b[:, None, :], x)
    noise_var = torch.exp(params["noise_logvar"])
    Yt = _as_tensor(Y_batch).T  # B x p
    ll = -0.5 * torch.log(2 * math.pi * noise_var) - (Yt - F_) ** 2 / (2.0 * noise_var)
    batch_size = Yt.shape[0]
    ell = ll.sum((1, 2)).mean() * (n_total / batch_size)

    kl_z = -kl_mvn_chol(params["qz_mean"], L_q, torch.zeros_like(params["qz_mean"]), L_zz)
    total = ell + kl_z + kl_h + kl_b
    terms = {"ell": ell, "kl_z": kl_z, "kl_h": kl_h, "kl_b": kl_b, "total": total}
    for name, value in terms.items():
        if not bool(torch.isfinite(value)):
            raise NumericalError(f"ELBO term {name} is not finite ({float(value)})", term=name)
    return terms


def _breakdown(terms):
    return ElboBreakdown(**{k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in terms.items()})


def elbo(state: VariationalState, spec: ModelSpec, dataset: Dataset, rng=None, mc_samples=8,
         batch=None, noise: ElboNoise | None = None, fixed_mixing=None, jitter_floor=None,
         temperature=None):
    """Monte-Carlo ELBO estimate with its four components.

    ``batch`` restricts the likelihood to a subset of points, rescaled by
    n / |batch|. ``noise`` fixes the random draws (``eps_x`` has one row per
    data point). ``fixed_mixing`` replaces q(H) by a point mass and drops
    its KL.
    """
    n = dataset.n
    idx = np.arange(n) if batch is None else np.asarray(batch)
    if idx.size == 0:
        raise ValueError("batch is empty")
    if noise is None:
        rng = np.random.default_rng() if rng is None else rng
        noise = ElboNoise.draw(rng, mc_samples, spec.p, spec.m, n)
    noise_b = ElboNoise(noise.eps_h, noise.u_b, noise.eps_x[:, idx])
    if jitter_floor is None:
        jitter_floor = state.config.get("jitter_floor", VIConfig.jitter_floor)
    T = state.temperature if temperature is None else temperature
    params = state_to_params(state)
    with torch.no_grad():
        terms = _elbo_terms(params, spec, _as_tensor(dataset.t[idx]), dataset.Y[:, idx], n, noise_b, T,
                            fixed_mixing=fixed_mixing, jitter_floor=jitter_floor)
    return _breakdown(terms)


def elbo_and_grad(state, spec, dataset, noise: ElboNoise, temperature=None, fixed_mixing=None,
                  jitter_floor=None):
    """ELBO total and its gradient w.r.t. the unconstrained parameters."""
    if jitter_floor is None:
        jitter_floor = state.config.get("jitter_floor", VIConfig.jitter_floor)
    T = state.temperature if temperature is None else temperature
    params = state_to_params(state)
    for v in params.values():
        v.requires_grad_(True)
    terms = _elbo_terms(params, spec, _as_tensor(dataset.t), dataset.Y, dataset.n, noise, T,
                        fixed_mixing=fixed_mixing, jitter_floor=jitter_floor)
    terms["total"].backward()
    return float(terms["total"].detach()), {k: v.grad.numpy().copy() for k, v in params.items()}


def elbo_from_params(params_np, spec, dataset, noise, temperature, fixed_mixing=None, jitter_floor=0.0):
    """ELBO total as a function of raw (unconstrained) parameter arrays."""
    params = {k: _as_tensor(v) for k, v in params_np.items()}
    with torch.no_grad():
        terms = _elbo_terms(params, spec, _as_tensor(dataset.t), dataset.Y, dataset.n, noise, temperature,
                            fixed_mixing=fixed_mixing, jitter_floor=jitter_floor)
    return float(terms["total"])


# -- training --------------------------------------------------------------


def _set_threads():
    cap = os.environ.get("GPALPS_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def fit(state: VariationalState, spec: ModelSpec, dataset: Dataset, config: VIConfig,
        fixed_mixing=None, callback=None):
    """Maximise the ELBO with Adam.

    The gate temperature follows :func:`anneal_temperature` over
    ``config.iterations`` steps. Returns the trained state and the per-step
    :class:`ElboBreakdown` trace (evaluated before each update).
    """
    _set_threads()
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    params = state_to_params(state)
    trainable = []
    for name, v in params.items():
        if name == "inducing" and not config.learn_inducing:
            continue
        if name == "noise_logvar" and not config.learn_noise:
            continue
        if name in ("qh_mean", "qh_logvar") and fixed_mixing is not None:
            continue
        v.requires_grad_(True)
        trainable.append((name, v))
    optimiser = torch.optim.Adam([v for _, v in trainable], lr=config.learning_rate)
    n = dataset.n
    B = n if config.batch_size is None else min(config.batch_size, n)
    t_all = _as_tensor(dataset.t)
    N = config.iterations
    trace = []
    start = state.iteration if state.total_iterations == N else 0
    for it in range(start, N):
        T = anneal_temperature(it, N)
        idx = np.arange(n) if B == n else np.sort(rng.choice(n, size=B, replace=False))
        noise = ElboNoise.draw(rng, config.mc_samples, spec.p, spec.m, B)
        try:
            terms = _elbo_terms(params, spec, t_all[idx], dataset.Y[:, idx], n, noise, T,
                                fixed_mixing=fixed_mixing, jitter_floor=config.jitter_floor)
        except NumericalError as err:
            err.iteration = it
            raise
        optimiser.zero_grad()
        (-terms["total"]).backward()
        for name, v in trainable:
            if not bool(torch.isfinite(v.grad).all()):
                raise NumericalError(f"non-finite gradient for {name} at iteration {it}",
                                     term=name, iteration=it)
        optimiser.step()
        trace.append(_breakdown(terms))
        if it % 500 == 0:
            logger.debug("iteration %d: elbo %.3f, temperature %.3f", it, trace[-1].total, T)
        if callback is not None:
            callback(it, trace[-1])
    out = params_to_state(params, state)
    out.iteration = N
    out.total_iterations = N
    out.config = asdict(config)
    return out, trace


# -- prediction ------------------------------------------------------------


def posterior_sampler(state: VariationalState, spec: ModelSpec, temperature=None):
    """Return ``sampler(t_star, rng) -> (H, b, X_star)`` drawing from q.

    Latent values are drawn from the per-point marginals of q(X), which is
    all that per-point predictive moments need.
    """
    floor = state.config.get("jitter_floor", VIConfig.jitter_floor)
    T = state.temperature if temperature is None else temperature
    cache = {}

    def sampler(t_star, rng):
        key = id(t_star)
        if key not in cache:
            grams = [gram_bundle(k, np.asarray(t_star, dtype=float), state.inducing, floor=floor, full=False)
                     for k in spec.kernels]
            cache[key] = marginal_qx(state, grams)
        d, v = cache[key]
        X = (d + np.sqrt(np.maximum(v, 0.0)) * rng.standard_normal(d.shape)).T
        H = state.qh_mean + np.sqrt(state.qh_var) * rng.standard_normal(state.qh_mean.shape)
        y = concrete_logit(state.gate_logits, T, rng.random(spec.m))
        b = np.where(spec.pinned, spec.theta, _sigmoid(y))
        return H, b, X

    return sampler


def gp_evidence(Y, K, noise):
    """Exact log marginal likelihood of single-output GP regression."""
    from .linalg import chol_solve

    y = np.asarray(Y, dtype=float).ravel()
    L, _ = chol_jitter(np.asarray(K) + noise * np.eye(y.size))
    alpha = chol_solve(L, y)
    return float(-0.5 * y @ alpha - 0.5 * logdet_from_chol(L) - 0.5 * y.size * math.log(2 * math.pi))
