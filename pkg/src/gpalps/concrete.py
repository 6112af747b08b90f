"""Binary concrete (relaxed Bernoulli) gates and the temperature schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import expit

PRIOR_TEMPERATURE = 0.5
U_CLAMP = 1e-7


@dataclass(frozen=True)
class ConcreteParams:
    probability: float
    temperature: float

    def __post_init__(self):
        if not 0.0 < self.probability < 1.0:
            raise ValueError(f"probability must lie in (0, 1), got {self.probability}")
        if not self.temperature > 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @property
    def log_alpha(self):
        return math.log(self.probability) - math.log1p(-self.probability)


def anneal_temperature(n, N):
    """Temperature of the variational gates at iteration ``n`` of ``N``.

    Low (0.66) at both ends with a Gaussian bump to 10 at three quarters of
    the run.
    """
    if N <= 0:
        raise ValueError("total iterations must be positive")
    return 0.66 + (10.0 - 0.66) * math.exp(-((n - 0.75 * N) ** 2) / (0.083**2 * N**2))


def _softplus(x):
    if isinstance(x, torch.Tensor):
        return F.softplus(x)
    return np.logaddexp(0.0, x)


def _clamp_u(u):
    if isinstance(u, torch.Tensor):
        return u.clamp(U_CLAMP, 1.0 - U_CLAMP)
    return np.clip(u, U_CLAMP, 1.0 - U_CLAMP)


def concrete_logit(log_alpha, temperature, u):
    """Logit of a concrete draw: ``(log_alpha + log u - log(1-u)) / temperature``."""
    u = _clamp_u(u)
    if isinstance(u, torch.Tensor) or isinstance(log_alpha, torch.Tensor):
        u = torch.as_tensor(u, dtype=torch.float64)
        return (log_alpha + torch.log(u) - torch.log1p(-u)) / temperature
    return (log_alpha + np.log(u) - np.log1p(-u)) / temperature


def concrete_sample(params: ConcreteParams, u):
    """Reparametrised concrete draw in (0, 1) from uniform noise ``u``."""
    y = concrete_logit(params.log_alpha, params.temperature, u)
    if isinstance(y, torch.Tensor):
        return torch.sigmoid(y)
    return expit(y)


def concrete_log_density_logit(y, log_alpha, temperature):
    """Log-density of the concrete variable ``b = sigmoid(y)``, evaluated from ``y``.

    Density is with respect to ``b`` (not ``y``); working from the logit keeps
    saturated draws finite.
    """
    sp_pos = _softplus(y)
    sp_neg = _softplus(-y)
    lam = temperature
    log_lam = math.log(lam) if not isinstance(lam, torch.Tensor) else torch.log(lam)
    return (log_lam + log_alpha + (lam + 1.0) * (sp_pos + sp_neg)
            - 2.0 * lam * sp_pos - 2.0 * _softplus(log_alpha - lam * y))


def concrete_log_density(x, params: ConcreteParams):
    """Log-density of the binary concrete distribution at ``x`` in (0, 1)."""
    if isinstance(x, torch.Tensor):
        if bool(((x <= 0) | (x >= 1)).any()):
            raise ValueError("concrete density is supported on the open interval (0, 1)")
        y = torch.log(x) - torch.log1p(-x)
    else:
        x = np.asarray(x, dtype=float)
        if np.any((x <= 0) | (x >= 1)):
            raise ValueError("concrete density is supported on the open interval (0, 1)")
        y = np.log(x) - np.log1p(-x)
    return concrete_log_density_logit(y, params.log_alpha, params.temperature)
