"""Synthetic generators, tabular ingestion, kernel ridge baselines and the
end-to-end comparisons built on the two inference engines."""

from __future__ import annotations

import csv
import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .gibbs import ChainConfig, latent_grams, run_chain
from .kernels import KernelSpec
from .linalg import chol_jitter, chol_solve
from .model import Dataset, ModelSpec, predict
from .vi import VIConfig, activation_probabilities, fit, init_state, posterior_sampler

BOSTON_COLUMNS = ("CRIM", "ZN", "INDUS", "CHAS", "NOX", "RM", "AGE", "DIS", "RAD", "TAX",
                  "PTRATIO", "B", "LSTAT", "MEDV")
MIXTURE_PERIODS = (3, 7, 7, 11, 13, 17, 19, 23, 23)
MAX_ENUMERATION_DIM = 20


class DataFormatError(ValueError):
    """Malformed tabular input; the message names the offending row/column."""


@dataclass
class SyntheticSpec:
    kind: str = "square-wave"
    frequency: float = 0.05
    periods: tuple = (7.0, 17.0, 23.0)
    n: int = 200
    duration: float | None = None
    noise_std: float = 0.0
    mixing: np.ndarray | None = None
    test_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("square-wave", "periodic-mixture"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.frequency <= 0 or any(p <= 0 for p in self.periods):
            raise ValueError("frequencies and periods must be positive")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.mixing is not None:
            self.mixing = np.asarray(self.mixing, dtype=float)
            if self.mixing.ndim != 2 or self.mixing.shape[1] != len(self.periods):
                raise ValueError("mixing matrix must have one column per period")


def square_wave(t, frequency):
    """+1 on the first half of each period, -1 on the second."""
    phase = np.mod(np.asarray(t, dtype=float) * frequency, 1.0)
    return np.where(phase < 0.5, 1.0, -1.0)


def _split_index(n, test_fraction):
    if test_fraction <= 0:
        return None
    return int(round(n * (1.0 - test_fraction)))


def gen_square_wave(spec: SyntheticSpec):
    """Square wave on a uniform grid (five periods unless ``duration`` is set)."""
    duration = 5.0 / spec.frequency if spec.duration is None else spec.duration
    t = np.linspace(0.0, duration, spec.n, endpoint=False)
    y = square_wave(t, spec.frequency)
    if spec.noise_std > 0:
        y = y + spec.noise_std * np.random.default_rng(spec.seed).standard_normal(spec.n)
    return Dataset(t, y[None, :], _split_index(spec.n, spec.test_fraction), ["y"])


def mixture_matrix(m_star=3, p=9, seed=0):
    """``[I ; Z^T]`` with a seeded standard-normal block Z."""
    Z = np.random.default_rng(seed).standard_normal((m_star, p - m_star))
    return np.vstack([np.eye(m_star), Z.T])


def gen_periodic_mixture(spec: SyntheticSpec):
    """Noisy sinusoids mixed into outputs by ``spec.mixing`` (default ``[I_3 ; Z^T]``).

    Returns
    -------
    dataset, mixing, latents
        ``latents`` are the noise-free sinusoids (m* x n).
    """
    rng = np.random.default_rng(spec.seed)
    periods = np.asarray(spec.periods, dtype=float)
    H = mixture_matrix(len(periods), 9, spec.seed) if spec.mixing is None else spec.mixing
    t = np.arange(spec.n, dtype=float) if spec.duration is None else \
        np.linspace(0.0, spec.duration, spec.n, endpoint=False)
    latents = np.sin(2.0 * np.pi * t[None, :] / periods[:, None])
    noisy = latents + spec.noise_std * rng.standard_normal(latents.shape)
    Y = H @ noisy
    names = [f"y{i + 1}" for i in range(H.shape[0])]
    return Dataset(t, Y, _split_index(spec.n, spec.test_fraction), names), H, latents


def square_wave_model(frequency=0.05, m=8, noise=0.1):
    """Cosine latents at the first ``m`` multiples of ``frequency``, one output."""
    return ModelSpec.default([KernelSpec.cosine(i * frequency) for i in range(1, m + 1)], p=1, noise=noise)


def mixture_model(periods=MIXTURE_PERIODS, p=9, noise=1.0):
    return ModelSpec.default([KernelSpec.cosine(1.0 / T) for T in periods], p=p, noise=noise)


# -- tabular data ------------------------------------------------------------


@dataclass
class TabularDataset:
    features: np.ndarray
    target: np.ndarray
    names: list
    train_idx: np.ndarray
    test_idx: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    raw_features: np.ndarray = field(repr=False, default=None)
    target_name: str = "target"

    @property
    def d(self):
        return self.features.shape[1]

    @property
    def n_train(self):
        return len(self.train_idx)

    def subsample(self, n_train, n_test, seed=0):
        rng = np.random.default_rng(seed)
        tr = np.sort(rng.choice(self.train_idx, size=n_train, replace=False))
        te = np.sort(rng.choice(self.test_idx, size=n_test, replace=False))
        return TabularDataset(self.features, self.target, self.names, tr, te, self.feature_mean,
                              self.feature_std, self.raw_features, self.target_name)


def default_boston_path():
    return str(resources.files("gpalps").joinpath("data/boston.csv"))


def read_numeric_csv(path, expected_columns=None):
    """Parse a headered all-numeric CSV with row/column diagnostics."""
    try:
        fh = open(path, newline="")
    except OSError as err:
        raise DataFormatError(f"cannot open {path}: {err}") from err
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: file is empty") from None
        if expected_columns is not None and len(header) != expected_columns:
            raise DataFormatError(f"{path}: header has {len(header)} columns, expected {expected_columns}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}: row {lineno} has {len(row)} columns, expected {len(header)}")
            values = []
            for col, cell in enumerate(row):
                cell = cell.strip()
                if cell == "":
                    raise DataFormatError(f"{path}: missing value at row {lineno}, column {header[col]}")
                try:
                    value = float(cell)
                except ValueError:
                    raise DataFormatError(
                        f"{path}: non-numeric value {cell!r} at row {lineno}, column {header[col]}") from None
                if not math.isfinite(value):
                    raise DataFormatError(f"{path}: non-finite value at row {lineno}, column {header[col]}")
                values.append(value)
            rows.append(values)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return header, np.array(rows)


def load_tabular(path=None, target="MEDV", split_fraction=0.8, seed=0, expected_columns=14):
    """Load a numeric CSV, shuffle-split it and standardise the features.

    Standardisation statistics come from the training split only.
    """
    path = default_boston_path() if path is None else path
    header, data = read_numeric_csv(path, expected_columns)
    if target not in header:
        raise DataFormatError(f"{path}: target column {target!r} not found")
    if not 0.0 < split_fraction < 1.0:
        raise ValueError("split_fraction must lie in (0, 1)")
    ti = header.index(target)
    names = [h for i, h in enumerate(header) if i != ti]
    raw = np.delete(data, ti, axis=1)
    y = data[:, ti]
    perm = np.random.default_rng(seed).permutation(len(y))
    n_train = int(round(split_fraction * len(y)))
    train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    mean = raw[train_idx].mean(0)
    std = raw[train_idx].std(0)
    std = np.where(std > 0, std, 1.0)
    return TabularDataset((raw - mean) / std, y, names, train_idx, test_idx, mean, std, raw, target)


# -- kernel ridge regression --------------------------------------------------


def default_ridge(data: TabularDataset):
    return 1e-2 * data.n_train


def _feature_grams(data: TabularDataset, lengthscale=1.0):
    X = data.features
    idx = np.concatenate([data.train_idx, data.test_idx])
    Xs = X[idx]
    diff = Xs[:, None, :] - Xs[None, :, :]
    return np.exp(-0.5 * diff**2 / lengthscale**2).transpose(2, 0, 1)


def _krr_rmse(Kall, y_train, y_test, n_train, ridge):
    y_mean = y_train.mean()
    if Kall is None:
        return float(np.sqrt(np.mean((y_test - y_mean) ** 2)))
    K_tr = Kall[:n_train, :n_train]
    K_te = Kall[n_train:, :n_train]
    L, _ = chol_jitter(K_tr + ridge * np.eye(n_train), check=False)
    alpha = chol_solve(L, y_train - y_mean)
    pred = y_mean + K_te @ alpha
    return float(np.sqrt(np.mean((y_test - pred) ** 2)))


def krr_fit_predict(data: TabularDataset, mask, ridge=None, lengthscale=1.0, grams=None):
    """Test RMSE of kernel ridge regression on the selected features.

    The kernel is a sum of unit-lengthscale RBFs, one per selected feature.
    An empty mask predicts the training mean.
    """
    mask = np.asarray(mask, dtype=bool)
    ridge = default_ridge(data) if ridge is None else ridge
    grams = _feature_grams(data, lengthscale) if grams is None else grams
    y_tr, y_te = data.target[data.train_idx], data.target[data.test_idx]
    Kall = grams[mask].sum(0) if mask.any() else None
    return _krr_rmse(Kall, y_tr, y_te, data.n_train, ridge)


def mask_to_int(mask):
    return int(sum(1 << i for i, v in enumerate(mask) if v))


def int_to_mask(code, d):
    return np.array([(code >> i) & 1 for i in range(d)], dtype=bool)


@dataclass
class BenchmarkResult:
    rmse: np.ndarray
    d: int
    names: list = field(default_factory=list)
    query_mask: np.ndarray | None = None

    @property
    def masks(self):
        return np.arange(len(self.rmse))

    def rank(self, mask):
        value = self.rmse[mask_to_int(mask)]
        return int(np.sum(self.rmse < value)) + 1

    def percentile(self, mask=None):
        """100 * rank / 2^d (the best model scores 100 / 2^d)."""
        mask = self.query_mask if mask is None else mask
        return 100.0 * self.rank(mask) / len(self.rmse)

    def histogram(self, bins=50):
        return np.histogram(self.rmse, bins=bins)

    def best_mask(self):
        return int_to_mask(int(np.argmin(self.rmse)), self.d)

    def to_dict(self):
        out = {"masks": self.masks.tolist(), "rmse": self.rmse.tolist(), "names": list(self.names),
               "query_mask": None, "percentile": None}
        if self.query_mask is not None:
            out["query_mask"] = [bool(v) for v in self.query_mask]
            out["percentile"] = self.percentile()
        return out

    @classmethod
    def from_dict(cls, d):
        rmse = np.asarray(d["rmse"], dtype=float)
        q = d.get("query_mask")
        return cls(rmse, int(round(math.log2(len(rmse)))), d.get("names", []),
                   None if q is None else np.asarray(q, dtype=bool))


def _worker_count():
    cap = os.environ.get("GPALPS_THREADS")
    return max(1, int(cap)) if cap else (os.cpu_count() or 1)


def enumerate_subsets(data: TabularDataset, ridge=None, query_mask=None, lengthscale=1.0, workers=None):
    """KRR test RMSE for every feature subset, indexed by the subset's bitmask."""
    d = data.d
    if d > MAX_ENUMERATION_DIM:
        raise ValueError(f"refusing to enumerate 2^{d} subsets (limit d <= {MAX_ENUMERATION_DIM})")
    ridge = default_ridge(data) if ridge is None else ridge
    grams = _feature_grams(data, lengthscale)
    y_tr, y_te = data.target[data.train_idx], data.target[data.test_idx]

    def one(code):
        mask = int_to_mask(code, d)
        Kall = grams[mask].sum(0) if mask.any() else None
        return _krr_rmse(Kall, y_tr, y_te, data.n_train, ridge)

    codes = range(2**d)
    workers = _worker_count() if workers is None else workers
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rmse = list(pool.map(one, codes))
    else:
        rmse = [one(c) for c in codes]
    qm = None if query_mask is None else np.asarray(query_mask, dtype=bool)
    return BenchmarkResult(np.array(rmse), d, list(data.names), qm)


# -- GP-ALPS feature selection --------------------------------------------------


def tabular_model(data: TabularDataset, noise=0.5):
    """One unit-lengthscale RBF latent per feature, one output."""
    kernels = [KernelSpec.rbf(1.0, dim=j) for j in range(data.d)]
    return ModelSpec.default(kernels, p=1, noise=noise)


def tabular_to_dataset(data: TabularDataset):
    """Training split as a Dataset with a standardised target."""
    y = data.target[data.train_idx]
    y = (y - y.mean()) / y.std()
    return Dataset(data.features[data.train_idx], y[None, :], None, list(data.names))


def gp_alps_select(data: TabularDataset, config: VIConfig | None = None, spec: ModelSpec | None = None,
                   threshold=0.5):
    """Train the gated model with one latent per feature and threshold rho.

    Returns
    -------
    mask, rho, state
    """
    config = config or VIConfig(n_inducing=100)
    spec = tabular_model(data) if spec is None else spec
    ds = tabular_to_dataset(data)
    state = init_state(spec, ds, config)
    state, trace = fit(state, spec, ds, config)
    rho = state.rho
    return rho > threshold, rho, state


# -- VI vs MCMC ----------------------------------------------------------------


@dataclass
class Comparison:
    rho_vi: np.ndarray
    freq_mcmc: np.ndarray
    vi_mean: np.ndarray
    vi_var: np.ndarray
    mcmc_mean: np.ndarray
    mcmc_var: np.ndarray
    noise: np.ndarray
    trace: list = field(default_factory=list, repr=False)
    chain: object = field(default=None, repr=False)

    def table(self):
        return [{"latent": j, "rho_vi": float(a), "rho_mcmc": float(b), "abs_diff": float(abs(a - b))}
                for j, (a, b) in enumerate(zip(self.rho_vi, self.freq_mcmc))]

    @property
    def max_abs_diff(self):
        return float(np.max(np.abs(self.rho_vi - self.freq_mcmc)))


def compare_vi_mcmc(dataset: Dataset, spec: ModelSpec, vi_config: VIConfig, chain_config: ChainConfig,
                    predictive_samples=256, chain_csv=None):
    """Fit both engines on the same model and tabulate gates and reconstructions.

    When VI learns the noise variances, the chain reuses the learned values so
    both engines target the same posterior.
    """
    state = init_state(spec, dataset, vi_config)
    state, trace = fit(state, spec, dataset, vi_config)
    chain_spec = spec.replace(noise=state.noise) if vi_config.learn_noise else spec
    chain = run_chain(dataset, chain_spec, chain_config, csv_path=chain_csv)
    rng = np.random.default_rng(vi_config.seed)
    vi_mean, vi_var = predict(posterior_sampler(state, spec), dataset.t, state.noise,
                              predictive_samples, rng)
    return Comparison(activation_probabilities(state, spec), chain.activation_frequency, vi_mean, vi_var,
                      chain.F_mean, chain.F_var + chain_spec.noise[:, None], state.noise, trace, chain)


# -- experiment presets ----------------------------------------------------------

SQUARE_WAVE_VI = dict(iterations=5000, n_inducing=10, learning_rate=1e-2, mc_samples=8)
MIXTURE_VI = dict(iterations=3000, n_inducing=10, learning_rate=1e-2, mc_samples=8)
BOSTON_VI = dict(iterations=2000, n_inducing=20, learning_rate=1e-2, mc_samples=8)
SQUARE_WAVE_INIT_NOISE = 0.1
MIXTURE_INIT_NOISE = 3.0


def vi_config(preset, seed=0, **overrides):
    """A :class:`VIConfig` from a preset dict, ``seed`` and non-None overrides."""
    values = dict(preset, seed=seed)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return VIConfig(**values)


def run_square_wave(seed=0, frequency=0.05, m=8, n=200, noise_std=0.0, init_noise=SQUARE_WAVE_INIT_NOISE,
                    **vi_overrides):
    """Fit the harmonic-selection model to a square wave.

    Returns
    -------
    dataset, spec, state, trace
    """
    dataset = gen_square_wave(SyntheticSpec("square-wave", frequency=frequency, n=n,
                                            noise_std=noise_std, seed=seed))
    spec = square_wave_model(frequency, m, init_noise)
    config = vi_config(SQUARE_WAVE_VI, seed, **vi_overrides)
    state, trace = fit(init_state(spec, dataset, config), spec, dataset, config)
    return dataset, spec, state, trace


def run_mixture(seed=0, n=200, noise_std=1.0, periods=MIXTURE_PERIODS, init_noise=MIXTURE_INIT_NOISE,
                test_fraction=0.0, **vi_overrides):
    """Fit the nine-latent model to the noisy periodic mixture.

    Returns
    -------
    dataset, spec, state, trace, mixing
    """
    dataset, mixing, _ = gen_periodic_mixture(SyntheticSpec("periodic-mixture", n=n, noise_std=noise_std,
                                                            test_fraction=test_fraction, seed=seed))
    train = dataset.train()
    spec = mixture_model(periods, dataset.p, init_noise)
    config = vi_config(MIXTURE_VI, seed, **vi_overrides)
    state, trace = fit(init_state(spec, train, config), spec, train, config)
    return dataset, spec, state, trace, mixing


def mixture_outcome(rho, periods=MIXTURE_PERIODS, truth=(7, 17, 23)):
    """Check recovery of the true periods and parsimony among duplicates."""
    periods = np.asarray(periods)
    on = np.asarray(rho) > 0.5
    represented = all(on[periods == T].any() for T in truth)
    duplicates = [T for T in np.unique(periods) if np.sum(periods == T) > 1]
    parsimonious = all(np.sum(on[periods == T]) == 1 for T in duplicates)
    return represented and parsimonious
