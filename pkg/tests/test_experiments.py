"""Data generators, tabular ingestion, kernel ridge baselines and comparisons."""

import json
import math

import numpy as np
import pytest

from gpalps.experiments import (
    BenchmarkResult,
    DataFormatError,
    SyntheticSpec,
    TabularDataset,
    compare_vi_mcmc,
    enumerate_subsets,
    gen_periodic_mixture,
    gen_square_wave,
    gp_alps_select,
    krr_fit_predict,
    load_tabular,
    mask_to_int,
    mixture_outcome,
    square_wave,
)
from gpalps.gibbs import ChainConfig, _batch_se
from gpalps.kernels import KernelSpec
from gpalps.model import Dataset, ModelSpec, mix
from gpalps.vi import VIConfig

BOSTON_HEADER = "CRIM,ZN,INDUS,CHAS,NOX,RM,AGE,DIS,RAD,TAX,PTRATIO,B,LSTAT,MEDV"


class TestSquareWave:
    def test_quarter_period(self):
        f = 0.05
        assert square_wave(np.array([1 / (4 * f)]), f)[0] == 1.0
        ds = gen_square_wave(SyntheticSpec(frequency=f))
        k = np.argmin(np.abs(ds.t - 1 / (4 * f)))
        assert ds.t[k] == 5.0 and ds.Y[0, k] == 1.0

    def test_values_and_shape(self):
        ds = gen_square_wave(SyntheticSpec(n=200))
        assert ds.p == 1 and ds.n == 200
        assert set(np.unique(ds.Y)) == {-1.0, 1.0}

    def test_zero_mean_over_period(self):
        t = np.linspace(0, 20, 400, endpoint=False)
        assert abs(square_wave(t, 0.05).mean()) < 1e-12

    def test_spectrum_has_odd_harmonics_only(self):
        f, n = 0.05, 400
        ds = gen_square_wave(SyntheticSpec(frequency=f, n=n, duration=100.0))
        power = np.abs(np.fft.rfft(ds.Y[0])) ** 2
        base = int(round(f * 100.0))  # bin of the fundamental
        peaks = np.nonzero(power > 1e-6 * power.max())[0]
        assert np.all(peaks % base == 0)
        assert np.all((peaks // base) % 2 == 1)

    def test_noise_is_seeded(self):
        a = gen_square_wave(SyntheticSpec(noise_std=0.3, seed=2))
        b = gen_square_wave(SyntheticSpec(noise_std=0.3, seed=2))
        np.testing.assert_array_equal(a.Y, b.Y)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SyntheticSpec(frequency=0.0)
        with pytest.raises(ValueError):
            SyntheticSpec(kind="sawtooth")


class TestMixture:
    def test_identity_block(self):
        H = np.vstack([np.eye(3), np.zeros((6, 3))])
        ds, mixing, latents = gen_periodic_mixture(SyntheticSpec("periodic-mixture", noise_std=0.0, mixing=H))
        np.testing.assert_allclose(ds.Y[:3], latents)
        np.testing.assert_array_equal(ds.Y[3:], 0.0)

    def test_shapes(self):
        ds, mixing, latents = gen_periodic_mixture(SyntheticSpec("periodic-mixture"))
        assert ds.p == 9 and mixing.shape == (9, 3) and latents.shape[0] == 3
        np.testing.assert_array_equal(mixing[:3], np.eye(3))

    def test_spectrum_has_true_periods_only(self):
        n = 7 * 17 * 23
        ds, _, _ = gen_periodic_mixture(SyntheticSpec("periodic-mixture", n=n, noise_std=0.0))
        bins = {n // 7, n // 17, n // 23}
        for y in ds.Y:
            power = np.abs(np.fft.rfft(y)) ** 2
            peaks = set(np.nonzero(power > 1e-8 * power.max())[0].tolist())
            assert peaks <= bins and peaks

    def test_seeded(self):
        a = gen_periodic_mixture(SyntheticSpec("periodic-mixture", seed=4))
        b = gen_periodic_mixture(SyntheticSpec("periodic-mixture", seed=4))
        np.testing.assert_array_equal(a[0].Y, b[0].Y)

    def test_bad_mixing_shape(self):
        with pytest.raises(ValueError):
            SyntheticSpec("periodic-mixture", mixing=np.ones((9, 2)))

    def test_outcome_rule(self):
        periods = (3, 7, 7, 11, 13, 17, 19, 23, 23)
        assert mixture_outcome([0, 1, 0, 0, 0, 1, 0, 0, 1], periods)
        assert not mixture_outcome([0, 1, 1, 0, 0, 1, 0, 0, 1], periods)
        assert not mixture_outcome([0, 1, 0, 0, 0, 0, 0, 0, 1], periods)


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


class TestLoadTabular:
    def test_boston_shape(self):
        data = load_tabular()
        assert data.features.shape == (506, 13) and data.target.shape == (506,)
        assert data.names[3] == "CHAS" and data.target_name == "MEDV"

    def test_standardised_training_split(self):
        data = load_tabular()
        Xtr = data.features[data.train_idx]
        assert np.all(np.abs(Xtr.mean(0)) < 1e-8)
        np.testing.assert_allclose(Xtr.std(0), 1.0, atol=1e-8)

    def test_split_deterministic(self):
        a, b = load_tabular(seed=3), load_tabular(seed=3)
        np.testing.assert_array_equal(a.train_idx, b.train_idx)
        assert len(a.train_idx) == 405 and len(a.test_idx) == 101
        assert not set(a.train_idx) & set(a.test_idx)

    def test_non_numeric(self, tmp_path):
        p = _write(tmp_path / "x.csv", [BOSTON_HEADER, ",".join(["1"] * 13 + ["abc"])])
        with pytest.raises(DataFormatError, match="row 2, column MEDV"):
            load_tabular(p)

    def test_wrong_column_count(self, tmp_path):
        p = _write(tmp_path / "x.csv", [BOSTON_HEADER, ",".join(["1"] * 14), ",".join(["1"] * 12)])
        with pytest.raises(DataFormatError, match="row 3 has 12 columns"):
            load_tabular(p)

    def test_missing_value(self, tmp_path):
        p = _write(tmp_path / "x.csv", [BOSTON_HEADER, ",".join(["1"] * 5 + [""] + ["1"] * 8)])
        with pytest.raises(DataFormatError, match="missing value at row 2, column RM"):
            load_tabular(p)

    def test_header_column_count(self, tmp_path):
        p = _write(tmp_path / "x.csv", ["A,B", "1,2"])
        with pytest.raises(DataFormatError, match="header has 2 columns"):
            load_tabular(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError, match="cannot open"):
            load_tabular(tmp_path / "nope.csv")


def _toy_tabular(seed=0, n=60, d=4, relevant=(0, 2), noise=0.1, duplicate=False):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    if duplicate:
        X[:, 1] = X[:, 0]
    y = sum(np.sin(1.5 * X[:, j]) for j in relevant) + noise * rng.normal(size=n) if relevant else \
        rng.normal(size=n)
    perm = rng.permutation(n)
    tr, te = np.sort(perm[: int(0.8 * n)]), np.sort(perm[int(0.8 * n):])
    mean, std = X[tr].mean(0), X[tr].std(0)
    return TabularDataset((X - mean) / std, y, [f"x{j}" for j in range(d)], tr, te, mean, std, X)


class TestKernelRidge:
    def test_empty_mask_predicts_training_mean(self):
        data = _toy_tabular()
        rmse = krr_fit_predict(data, np.zeros(data.d, bool))
        yt = data.target[data.test_idx]
        assert rmse == pytest.approx(math.sqrt(np.mean((yt - data.target[data.train_idx].mean()) ** 2)))

    def test_huge_ridge_gives_baseline(self):
        data = _toy_tabular()
        baseline = krr_fit_predict(data, np.zeros(data.d, bool))
        assert krr_fit_predict(data, np.ones(data.d, bool), ridge=1e12) == pytest.approx(baseline, rel=1e-6)

    def test_duplicate_feature_well_posed(self):
        data = _toy_tabular(duplicate=True)
        a = krr_fit_predict(data, np.array([True, False, False, False]))
        b = krr_fit_predict(data, np.array([True, True, False, False]))
        assert np.isfinite(a) and np.isfinite(b)

    def test_dual_matches_primal(self):
        data = _toy_tabular(n=30)
        mask = np.array([True, False, True, True])
        ridge = 0.7
        idx = np.concatenate([data.train_idx, data.test_idx])
        Z = data.features[idx][:, mask]
        K = sum(np.exp(-0.5 * (Z[:, None, j] - Z[None, :, j]) ** 2) for j in range(Z.shape[1]))
        w, V = np.linalg.eigh(K)
        Phi = V * np.sqrt(np.clip(w, 0, None))  # K = Phi Phi^T
        ntr = len(data.train_idx)
        ytr = data.target[data.train_idx]
        ybar = ytr.mean()
        P = Phi[:ntr]
        beta = np.linalg.solve(P.T @ P + ridge * np.eye(P.shape[1]), P.T @ (ytr - ybar))
        pred = ybar + Phi[ntr:] @ beta
        primal = math.sqrt(np.mean((data.target[data.test_idx] - pred) ** 2))
        assert krr_fit_predict(data, mask, ridge=ridge) == pytest.approx(primal, abs=1e-6)


class TestEnumerate:
    def test_two_features(self):
        data = _toy_tabular(d=2, relevant=(0,))
        bench = enumerate_subsets(data, workers=1)
        assert len(bench.rmse) == 4

    def test_invariants(self):
        data = _toy_tabular()
        bench = enumerate_subsets(data, workers=2)
        full = np.ones(data.d, bool)
        assert bench.rmse.min() <= bench.rmse[-1]
        assert bench.rmse[mask_to_int(full)] == krr_fit_predict(data, full)
        assert bench.percentile(bench.best_mask()) == pytest.approx(100.0 / 2**data.d)
        assert 0 <= bench.percentile(full) <= 100
        assert bench.histogram(bins=7)[0].sum() == 2**data.d

    def test_parallel_matches_serial(self):
        data = _toy_tabular()
        np.testing.assert_array_equal(enumerate_subsets(data, workers=1).rmse, enumerate_subsets(data, workers=3).rmse)

    def test_json_roundtrip(self):
        data = _toy_tabular()
        mask = np.array([True, False, True, False])
        bench = enumerate_subsets(data, query_mask=mask, workers=1)
        d = json.loads(json.dumps(bench.to_dict()))
        assert set(d) >= {"masks", "rmse", "query_mask", "percentile"}
        back = BenchmarkResult.from_dict(d)
        np.testing.assert_array_equal(back.rmse, bench.rmse)
        assert back.percentile() == bench.percentile()

    def test_guard(self):
        data = _toy_tabular(d=21, relevant=(0,))
        with pytest.raises(ValueError, match="refusing"):
            enumerate_subsets(data)


class TestSelection:
    CONFIG = dict(iterations=800, n_inducing=10)

    def test_recovers_relevant_features(self):
        hits = 0
        for seed in range(20):
            data = _toy_tabular(seed, n=80, d=5)
            mask, rho, _ = gp_alps_select(data, VIConfig(seed=seed, **self.CONFIG))
            hits += bool(mask[0] and mask[2])
        assert hits >= 18

    def test_null_target_is_sparse(self):
        sizes = []
        for seed in range(20):
            data = _toy_tabular(seed, n=80, d=5, relevant=())
            mask, rho, _ = gp_alps_select(data, VIConfig(seed=seed, **self.CONFIG))
            assert np.all((rho > 0) & (rho < 1))
            sizes.append(mask.sum())
        assert np.mean(sizes) <= 2


class TestCompare:
    def test_gate_free_predictions_agree(self):
        """Pinned gates: predictive means within twice the pooled Monte-Carlo error.

        Chain error uses batch means over the retained draws; the VI error is
        the plain standard error of its independent predictive samples.
        """
        rng = np.random.default_rng(0)
        t = np.linspace(0, 6, 25)
        Y = np.sin(t)[None] + 0.1 * rng.normal(size=(1, 25))
        spec = ModelSpec([KernelSpec.rbf(1.5)], 1.0, 1.0, [0.01])
        samples = 4000
        comp = compare_vi_mcmc(Dataset(t, Y), spec,
                               VIConfig(iterations=3000, n_inducing=25, learn_noise=False, seed=1),
                               ChainConfig(iterations=samples + 500, burn_in=500, seed=1, keep_latents=True),
                               predictive_samples=samples)
        assert len(comp.table()) == spec.m
        np.testing.assert_array_equal(comp.rho_vi, comp.freq_mcmc)  # both pinned on
        F = np.array([mix(s.H, s.b, s.X) for s in comp.chain.samples])
        chain_se = _batch_se(F)
        vi_se = np.sqrt((comp.vi_var - spec.noise[:, None]) / samples)
        pooled = np.sqrt(chain_se**2 + vi_se**2)
        assert np.all(np.abs(comp.vi_mean - comp.mcmc_mean) <= 2 * pooled)
