"""Cholesky-based linear algebra, Gaussian containers and closed-form KLs.

Functions accept numpy arrays or torch tensors; torch inputs keep the
autograd graph intact. No explicit matrix inverses are formed anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
import torch

from .kernels import KernelSpec, gram

JITTER_START = 1e-10
JITTER_CAP = 1e-4
JITTER_GROWTH = 10.0


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix stays indefinite after the maximum jitter."""


def _xp(a):
    return torch if isinstance(a, torch.Tensor) else np


def _jitter_ladder(floor=0.0):
    out = [floor] if floor > 0 else [0.0]
    jitter = max(JITTER_START, floor * JITTER_GROWTH) if floor > 0 else JITTER_START
    while jitter <= JITTER_CAP * (1 + 1e-9):
        out.append(jitter)
        jitter *= JITTER_GROWTH
    return out


def chol_jitter(M, floor=0.0, check=True):
    """Lower Cholesky factor of ``M + jitter * I``.

    Tries ``jitter = floor`` first (zero by default), then escalates by
    factors of ten from 1e-10 up to 1e-4. Torch inputs may be batched, in
    which case one jitter is shared by the whole batch.

    Returns
    -------
    L, jitter
        ``L @ L.T == M + jitter * I``.
    """
    xp = _xp(M)
    n = M.shape[-1]
    if xp is np:
        M = np.asarray(M, dtype=float)
    if check and n:
        if xp is np:
            asym, scale = np.max(np.abs(M - np.swapaxes(M, -1, -2))), np.max(np.abs(M))
        else:
            with torch.no_grad():
                asym = float((M - M.transpose(-1, -2)).abs().max())
                scale = float(M.abs().max())
        if not asym <= 1e-8 * max(1.0, scale):
            raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    for jitter in _jitter_ladder(floor):
        if xp is np:
            try:
                L = np.linalg.cholesky(M + jitter * np.eye(n)) if jitter else np.linalg.cholesky(M)
            except np.linalg.LinAlgError:
                continue
            if np.all(np.isfinite(L)):
                return L, jitter
        else:
            A = M + jitter * torch.eye(n, dtype=M.dtype) if jitter else M
            L, info = torch.linalg.cholesky_ex(A)
            if not bool(info.any()) and bool(torch.isfinite(L).all()):
                return L, jitter
    raise NotPositiveDefiniteError(f"matrix not positive definite even with jitter {JITTER_CAP}")


def solve_tril(L, B, transpose=False):
    """Solve ``L X = B`` (or ``L.T X = B``) for lower-triangular ``L``."""
    if isinstance(L, torch.Tensor):
        if transpose:
            return torch.linalg.solve_triangular(L.transpose(-1, -2), B, upper=True)
        return torch.linalg.solve_triangular(L, B, upper=False)
    return scipy.linalg.solve_triangular(L, B, lower=True, trans="T" if transpose else "N")


def chol_solve(L, B):
    """Solve ``(L L^T) X = B``."""
    return solve_tril(L, solve_tril(L, B), transpose=True)


def logdet_from_chol(L):
    xp = _xp(L)
    if xp is np:
        return 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)


@dataclass(frozen=True)
class DiagonalGaussian:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        var = np.broadcast_to(np.asarray(self.variance, dtype=float), mean.shape).copy()
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise ValueError("variances must be finite and strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    def to_full(self):
        return FullGaussian(self.mean.ravel(), np.diag(self.variance.ravel()))


@dataclass(frozen=True)
class FullGaussian:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @cached_property
    def chol(self):
        return chol_jitter(self.covariance)[0]


@dataclass(frozen=True)
class GramBundle:
    """Gram matrices of one latent kernel on data and inducing inputs."""

    K_cc: object
    K_cz: object
    K_zz: object
    chol_K_zz: object
    jitter: float


def gram_bundle(kernel: KernelSpec, t, tz, floor=0.0, full=True):
    """Build a :class:`GramBundle`; ``full=False`` keeps only diag(K_cc)."""
    from .kernels import gram_diag

    K_zz = gram(kernel, tz)
    L, jitter = chol_jitter(K_zz, floor=floor)
    K_cc = gram(kernel, t) if full else gram_diag(kernel, t)
    return GramBundle(K_cc=K_cc, K_cz=gram(kernel, t, tz), K_zz=K_zz, chol_K_zz=L, jitter=jitter)


def kl_mvn_chol(mean_q, L_q, mean_p, L_p):
    """KL(N(mean_q, L_q L_q^T) || N(mean_p, L_p L_p^T)) from Cholesky factors.

    Leading batch dimensions are summed over.
    """
    k = L_q.shape[-1]
    diff = (mean_q - mean_p)[..., None]
    M = solve_tril(L_p, L_q)
    a = solve_tril(L_p, diff)
    trace = (M**2).sum((-1, -2))
    quad = (a**2).sum((-1, -2))
    kl = 0.5 * (trace + quad - k + logdet_from_chol(L_p) - logdet_from_chol(L_q))
    return kl.sum()


def kl_diag(mean_q, var_q, mean_p, var_p):
    """Sum of elementwise KL(N(mean_q, var_q) || N(mean_p, var_p))."""
    xp = _xp(var_q)
    kl = 0.5 * xp.log(var_p / var_q) + (var_q + (mean_q - mean_p) ** 2) / (2.0 * var_p) - 0.5
    return kl.sum()


def gaussian_kl(q, p):
    """Closed-form KL(q || p) for diagonal or full Gaussians."""
    if isinstance(q, DiagonalGaussian) and isinstance(p, DiagonalGaussian):
        if q.mean.shape != p.mean.shape:
            raise ValueError(f"dimension mismatch: {q.mean.shape} vs {p.mean.shape}")
        return float(kl_diag(q.mean, q.variance, p.mean, p.variance))
    q = q.to_full() if isinstance(q, DiagonalGaussian) else q
    p = p.to_full() if isinstance(p, DiagonalGaussian) else p
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"dimension mismatch: {q.mean.shape} vs {p.mean.shape}")
    return float(kl_mvn_chol(q.mean, q.chol, p.mean, p.chol))


def mvn_reparam(mean, L, eps):
    """``mean + L @ eps``; ``eps`` may carry extra trailing sample columns."""
    if eps.ndim == mean.ndim:
        return mean + L @ eps
    return mean[..., None] + L @ eps


def mvn_sample(g: FullGaussian, rng: np.random.Generator, size=None):
    """Draw from ``g``; ``size`` adds a leading sample axis."""
    k = g.mean.size
    if size is None:
        return mvn_reparam(g.mean, g.chol, rng.standard_normal(k))
    eps = rng.standard_normal((k, size))
    return mvn_reparam(g.mean, g.chol, eps).T


def gaussian_logpdf(x, mean, var):
    xp = _xp(x) if isinstance(x, torch.Tensor) else _xp(var)
    return -0.5 * math.log(2 * math.pi) - 0.5 * xp.log(var) - (x - mean) ** 2 / (2.0 * var)
