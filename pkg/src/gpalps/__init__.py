"""Multi-output Gaussian-process regression with Bernoulli-gated latent processes.

Sparse variational inference with relaxed gates, plus an exact Gibbs sampler
used to check it.
"""

from .concrete import ConcreteParams, anneal_temperature, concrete_log_density, concrete_sample
from .gibbs import ChainConfig, GibbsState, run_chain, sample_b, sample_h, sample_x
from .kernels import InvalidKernelError, KernelSpec, gram
from .linalg import (DiagonalGaussian, FullGaussian, GramBundle, NotPositiveDefiniteError, chol_jitter,
                     gaussian_kl, mvn_sample)
from .model import Dataset, LatentDraw, ModelSpec, log_likelihood, predict, sample_prior
from .vi import (ElboBreakdown, NumericalError, VariationalState, VIConfig, activation_probabilities, elbo, fit,
                 init_state, marginal_qx)

__version__ = "0.1.0"
