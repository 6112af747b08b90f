"""Stationary covariance functions with fixed hyperparameters.

Every kernel works on plain numpy arrays and on torch tensors, so the same
definition feeds the Gibbs sampler (numpy) and the variational engine
(autograd through the inducing locations).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

KINDS = ("rbf", "exp-sine-squared", "cosine", "product")


class InvalidKernelError(ValueError):
    """Raised for malformed or non-finite kernel hyperparameters."""


def _xp(a):
    return torch if isinstance(a, torch.Tensor) else np


@dataclass(frozen=True)
class KernelSpec:
    """A positive-definite covariance function k(t, t').

    Parameters
    ----------
    kind
        One of ``rbf``, ``exp-sine-squared``, ``cosine`` or ``product``.
    lengthscale
        Used by ``rbf`` and ``exp-sine-squared``.
    frequency
        Frequency of ``cosine`` kernels; ``exp-sine-squared`` uses its
        reciprocal as the period.
    variance
        Marginal variance k(t, t).
    dim
        Input column the kernel looks at when inputs are two-dimensional.
        ``None`` uses every column.
    factors
        Component kernels of a ``product`` kernel.
    """

    kind: str = "rbf"
    lengthscale: float = 1.0
    frequency: float = 1.0
    variance: float = 1.0
    dim: int | None = None
    factors: tuple["KernelSpec", ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidKernelError(f"unknown kernel kind {self.kind!r}")
        for name in ("lengthscale", "frequency", "variance"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0.0:
                raise InvalidKernelError(f"{name} must be finite and positive, got {value}")
        if self.kind == "product" and not self.factors:
            raise InvalidKernelError("product kernel needs at least one factor")
        object.__setattr__(self, "factors", tuple(self.factors))

    @classmethod
    def cosine(cls, frequency, variance=1.0, dim=None):
        return cls(kind="cosine", frequency=frequency, variance=variance, dim=dim)

    @classmethod
    def periodic(cls, period, lengthscale=1.0, variance=1.0, dim=None):
        return cls(kind="exp-sine-squared", frequency=1.0 / period,
                   lengthscale=lengthscale, variance=variance, dim=dim)

    @classmethod
    def rbf(cls, lengthscale=1.0, variance=1.0, dim=None):
        return cls(kind="rbf", lengthscale=lengthscale, variance=variance, dim=dim)

    def to_dict(self):
        out = {"kind": self.kind, "lengthscale": self.lengthscale,
               "frequency": self.frequency, "variance": self.variance, "dim": self.dim}
        if self.factors:
            out["factors"] = [f.to_dict() for f in self.factors]
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        factors = tuple(cls.from_dict(f) for f in d.pop("factors", ()))
        if "period" in d:
            d["frequency"] = 1.0 / d.pop("period")
        return cls(factors=factors, **d)


def _column(x, dim):
    if x.ndim == 1:
        return x
    if dim is None:
        return x
    return x[:, dim]


def _sqdist(a, b):
    if a.ndim == 1:
        return (a[:, None] - b[None, :]) ** 2
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def _diff(a, b):
    if a.ndim != 1:
        raise InvalidKernelError("periodic kernels need one-dimensional inputs (set dim)")
    return a[:, None] - b[None, :]


def gram(kernel: KernelSpec, a, b=None):
    """Return the matrix with entries k(a_i, b_j).

    ``a`` and ``b`` are length-n vectors or n x d arrays. Passing ``b=None``
    gives the symmetric Gram matrix of ``a``.
    """
    if b is None:
        b = a
    xp = _xp(a)
    if xp is np:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
    if kernel.kind == "product":
        out = gram(kernel.factors[0], a, b)
        for factor in kernel.factors[1:]:
            out = out * gram(factor, a, b)
        return kernel.variance * out
    ca, cb = _column(a, kernel.dim), _column(b, kernel.dim)
    if kernel.kind == "rbf":
        return kernel.variance * xp.exp(-0.5 * _sqdist(ca, cb) / kernel.lengthscale**2)
    tau = _diff(ca, cb)
    if kernel.kind == "cosine":
        return kernel.variance * xp.cos(2.0 * math.pi * kernel.frequency * tau)
    # exp-sine-squared
    s = xp.sin(math.pi * kernel.frequency * tau)
    return kernel.variance * xp.exp(-2.0 * s**2 / kernel.lengthscale**2)


def gram_diag(kernel: KernelSpec, a):
    """Diagonal of ``gram(kernel, a)`` without forming the matrix."""
    n = a.shape[0]
    xp = _xp(a)
    if kernel.kind == "product":
        value = kernel.variance
        for factor in kernel.factors:
            value *= factor.variance
    else:
        value = kernel.variance
    if xp is np:
        return np.full(n, value)
    return torch.full((n,), value, dtype=a.dtype)


def _is_simple(kernels):
    kinds = {k.kind for k in kernels}
    return len(kinds) == 1 and "product" not in kinds


def stacked_gram(kernels, a, b=None):
    """Gram matrices of several kernels stacked into shape (m, len(a), len(b)).

    Kernels of a single non-product kind are evaluated in one vectorised
    pass; anything else falls back to a loop.
    """
    if b is None:
        b = a
    xp = _xp(a)
    if not _is_simple(kernels) or (a.ndim == 2 and any(k.dim is None for k in kernels)):
        mats = [gram(k, a, b) for k in kernels]
        return xp.stack(mats) if xp is np else torch.stack(mats)

    def _cols(x):
        if x.ndim == 1:
            return x[None, :]
        dims = [k.dim for k in kernels]
        return x[:, dims].T

    def _param(name):
        vals = np.array([getattr(k, name) for k in kernels], dtype=float)[:, None, None]
        return vals if xp is np else torch.as_tensor(vals, dtype=a.dtype)

    tau = _cols(a)[:, :, None] - _cols(b)[:, None, :]
    kind = kernels[0].kind
    var = _param("variance")
    if kind == "rbf":
        return var * xp.exp(-0.5 * tau**2 / _param("lengthscale") ** 2)
    if kind == "cosine":
        return var * xp.cos(2.0 * math.pi * _param("frequency") * tau)
    s = xp.sin(math.pi * _param("frequency") * tau)
    return var * xp.exp(-2.0 * s**2 / _param("lengthscale") ** 2)


def stacked_diag(kernels, a):
    """Diagonals of :func:`stacked_gram` (m x len(a))."""
    rows = [gram_diag(k, a) for k in kernels]
    return np.stack(rows) if _xp(a) is np else torch.stack(rows)
