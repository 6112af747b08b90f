"""Command-line entry point.

Every subcommand writes ``report.json`` (an :class:`ExperimentReport`) into
the output directory, plus CSV traces where they make sense. Exit codes:
1 for configuration errors, 2 for numerical failures, 3 for I/O errors.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import experiments as ex
from .gibbs import ChainConfig, run_chain
from .linalg import NotPositiveDefiniteError
from .model import Dataset, ModelSpec, predict
from .vi import NumericalError, VIConfig, fit, init_state, posterior_sampler

COMMANDS = ("train", "gibbs", "compare", "square-wave", "mixture", "boston", "enumerate", "report")
REPORT_FORMAT = "gpalps-report"
REPORT_NAME = "report.json"
SUMMARY_NAME = "summary.json"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class ReportError(OSError):
    """Missing or unreadable report."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    out: str = "runs"
    iterations: int | None = None
    batch_size: int | None = None
    inducing: int | None = None
    mc_samples: int | None = None
    ridge_weight: float | None = None
    noise_std: float | None = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        for name in ("iterations", "batch_size", "inducing", "mc_samples"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"{name} must be a positive integer")
        if self.ridge_weight is not None and not self.ridge_weight > 0:
            raise ConfigError("ridge weight must be positive")
        if self.noise_std is not None and not self.noise_std >= 0:
            raise ConfigError("noise std must be non-negative")

    def vi_overrides(self):
        return dict(iterations=self.iterations, batch_size=self.batch_size,
                    n_inducing=self.inducing, mc_samples=self.mc_samples)


@dataclass
class ExperimentReport:
    """Everything a run produces apart from its time series."""

    command: str
    seed: int
    config: dict
    activation_probabilities: list | None = None
    noise: list | None = None
    elbo_final: float | None = None
    comparison: list | None = None
    benchmark: dict | None = None
    rmse: dict | None = None
    files: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["format"] = REPORT_FORMAT
        return d

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != REPORT_FORMAT:
            raise ReportError("not an experiment report")
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def save(self, path):
        Path(path).write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, UnicodeDecodeError, TypeError) as err:
            raise ReportError(f"corrupt report {path}: {err}") from err


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    return obj


# -- CSV output ------------------------------------------------------------------


def write_trace_csv(path, trace, total_iterations):
    from .concrete import anneal_temperature

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "temperature", "ell", "kl_z", "kl_h", "kl_b", "total"])
        for i, b in enumerate(trace):
            w.writerow([i, repr(anneal_temperature(i, total_iterations)), repr(b.ell), repr(b.kl_z),
                        repr(b.kl_h), repr(b.kl_b), repr(b.total)])


def write_plot_csv(path, dataset: Dataset, mean, var):
    """Columns: t, then observed/mean/lower/upper per output (band is +-2 sd)."""
    names = dataset.names or [f"y{i}" for i in range(dataset.p)]
    sd = np.sqrt(np.maximum(var, 0.0))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["t"]
        for name in names:
            header += [f"observed_{name}", f"mean_{name}", f"lower_{name}", f"upper_{name}"]
        w.writerow(header)
        for k in range(dataset.n):
            row = [repr(float(dataset.t[k]))]
            for i in range(dataset.p):
                row += [repr(float(dataset.Y[i, k])), repr(float(mean[i, k])),
                        repr(float(mean[i, k] - 2 * sd[i, k])), repr(float(mean[i, k] + 2 * sd[i, k]))]
            w.writerow(row)


def read_csv_table(path):
    """Header and float matrix of any CSV this module writes."""
    from .experiments import read_numeric_csv

    return read_numeric_csv(path)


# -- config handling ----------------------------------------------------------------


def _build_parser():
    parser = _Parser(prog="gpalps", description="Gated multi-output GP regression experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("directory", nargs="?", help="run directory (report command only)")
    parser.add_argument("--config", help="JSON file with run settings; flags override it")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--inducing", type=int)
    parser.add_argument("--mc-samples", type=int)
    parser.add_argument("--ridge-weight", type=float)
    parser.add_argument("--noise-std", type=float)
    return parser


def parse_config(argv):
    parser = _build_parser()
    args = parser.parse_args(argv)
    values = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except FileNotFoundError as err:
            raise ConfigError(f"config file not found: {args.config}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {args.config} is not valid JSON: {err}") from err
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in fields(RunConfig)} - {"command", "options"}
    values = {k.replace("-", "_"): v for k, v in values.items()}
    options = {k: v for k, v in values.items() if k not in known}
    base = {k: v for k, v in values.items() if k in known}
    for name in known:
        flag = getattr(args, name, None)
        if flag is not None:
            base[name] = flag
    if args.command == "report":
        options["directory"] = args.directory or base.get("out")
        if not options["directory"]:
            raise ConfigError("report needs a run directory")
    elif args.directory:
        raise ConfigError(f"unexpected argument {args.directory!r}")
    try:
        return RunConfig(command=args.command, options=options, **base)
    except TypeError as err:
        raise ConfigError(str(err)) from err


def _load_dataset(options):
    """Dataset from ``options['data']`` (CSV: t then outputs) or ``options['synthetic']``."""
    if "data" in options:
        header, arr = ex.read_numeric_csv(options["data"])
        if len(header) < 2:
            raise ex.DataFormatError(f"{options['data']}: need an input column and at least one output")
        frac = float(options.get("test_fraction", 0.0))
        split = int(round(arr.shape[0] * (1 - frac))) if frac > 0 else None
        return Dataset(arr[:, 0], arr[:, 1:].T, split, header[1:])
    if "synthetic" in options:
        spec = ex.SyntheticSpec(**options["synthetic"])
        if spec.kind == "square-wave":
            return ex.gen_square_wave(spec)
        return ex.gen_periodic_mixture(spec)[0]
    raise ConfigError("this command needs 'data' or 'synthetic' in the config file")


def _load_model(options, dataset):
    if "model" not in options:
        raise ConfigError("this command needs a 'model' section in the config file")
    try:
        spec = ModelSpec.from_dict(options["model"])
    except (KeyError, TypeError) as err:
        raise ConfigError(f"malformed model section: {err}") from err
    if spec.p != dataset.p:
        raise ConfigError(f"model has {spec.p} outputs but the data has {dataset.p}")
    return spec


def _vi_config(cfg: RunConfig, preset=None):
    values = dict(preset or {})
    values.update(cfg.options.get("vi", {}))
    values["seed"] = cfg.seed
    values.update({k: v for k, v in cfg.vi_overrides().items() if v is not None})
    try:
        return VIConfig(**values)
    except TypeError as err:
        raise ConfigError(f"bad vi settings: {err}") from err


def _chain_config(cfg: RunConfig):
    values = dict(iterations=2000, burn_in=500)
    values.update(cfg.options.get("chain", {}))
    values["seed"] = cfg.seed
    if cfg.command == "gibbs" and cfg.iterations is not None:
        values["iterations"] = cfg.iterations
    try:
        return ChainConfig(**values)
    except TypeError as err:
        raise ConfigError(f"bad chain settings: {err}") from err


# -- commands ----------------------------------------------------------------------


def _predictive(state, spec, dataset, seed, samples):
    rng = np.random.default_rng(seed)
    return predict(posterior_sampler(state, spec), dataset.t, state.noise, samples, rng)


def _rmse_table(dataset, mean):
    out = {"train": float(np.sqrt(np.mean((dataset.Y[:, : dataset.test_index] - mean[:, : dataset.test_index]) ** 2)))}
    if dataset.test_index is not None:
        out["test"] = float(np.sqrt(np.mean((dataset.Y[:, dataset.test_index:] - mean[:, dataset.test_index:]) ** 2)))
    return out


def _vi_outputs(cfg, out, report, dataset, spec, state, trace):
    samples = int(cfg.options.get("predictive_samples", 256))
    mean, var = _predictive(state, spec, dataset, cfg.seed, samples)
    write_trace_csv(out / "trace.csv", trace, state.total_iterations)
    write_plot_csv(out / "plot.csv", dataset, mean, var)
    report.activation_probabilities = state.rho
    report.noise = state.noise
    report.elbo_final = trace[-1].total
    report.rmse = _rmse_table(dataset, mean)
    report.files += ["trace.csv", "plot.csv"]
    state.save(out / "state.json")
    report.files.append("state.json")


def _cmd_train(cfg, out, report):
    dataset = _load_dataset(cfg.options)
    spec = _load_model(cfg.options, dataset)
    config = _vi_config(cfg)
    train = dataset.train()
    state, trace = fit(init_state(spec, train, config), spec, train, config)
    report.config["vi"] = asdict(config)
    _vi_outputs(cfg, out, report, dataset, spec, state, trace)


def _cmd_square_wave(cfg, out, report):
    o = cfg.options
    config = _vi_config(cfg, ex.SQUARE_WAVE_VI)
    dataset, spec, state, trace = ex.run_square_wave(
        cfg.seed, o.get("frequency", 0.05), o.get("m", 8), o.get("n", 200), cfg.noise_std or 0.0,
        o.get("init_noise", ex.SQUARE_WAVE_INIT_NOISE), **{k: v for k, v in asdict(config).items() if k != "seed"})
    report.config["vi"] = asdict(config)
    report.extra["frequencies"] = [k.frequency for k in spec.kernels]
    _vi_outputs(cfg, out, report, dataset, spec, state, trace)


def _cmd_mixture(cfg, out, report):
    o = cfg.options
    config = _vi_config(cfg, ex.MIXTURE_VI)
    noise_std = 1.0 if cfg.noise_std is None else cfg.noise_std
    dataset, spec, state, trace, mixing = ex.run_mixture(
        cfg.seed, o.get("n", 200), noise_std, tuple(o.get("periods", ex.MIXTURE_PERIODS)),
        o.get("init_noise", ex.MIXTURE_INIT_NOISE), o.get("test_fraction", 0.0),
        **{k: v for k, v in asdict(config).items() if k != "seed"})
    report.config["vi"] = asdict(config)
    report.extra["periods"] = [1.0 / k.frequency for k in spec.kernels]
    report.extra["mixing_true"] = mixing
    report.extra["qh_mean"] = state.qh_mean
    report.extra["qh_var"] = state.qh_var
    report.extra["recovered"] = ex.mixture_outcome(state.rho, tuple(o.get("periods", ex.MIXTURE_PERIODS)))
    _vi_outputs(cfg, out, report, dataset, spec, state, trace)


def _cmd_gibbs(cfg, out, report):
    dataset = _load_dataset(cfg.options).train()
    spec = _load_model(cfg.options, dataset)
    chain_cfg = _chain_config(cfg)
    chain = run_chain(dataset, spec, chain_cfg, csv_path=out / "chain.csv")
    report.config["chain"] = asdict(chain_cfg)
    report.activation_probabilities = chain.activation_frequency
    report.noise = spec.noise
    write_plot_csv(out / "plot.csv", dataset, chain.F_mean, chain.F_var + spec.noise[:, None])
    report.rmse = _rmse_table(dataset, chain.F_mean)
    report.files += ["chain.csv", "plot.csv"]


def _cmd_compare(cfg, out, report):
    if "data" in cfg.options or "synthetic" in cfg.options:
        dataset = _load_dataset(cfg.options).train()
        spec = _load_model(cfg.options, dataset)
        config = _vi_config(cfg)
    else:
        dataset = ex.gen_square_wave(ex.SyntheticSpec("square-wave", noise_std=cfg.noise_std or 0.0, seed=cfg.seed))
        spec = ex.square_wave_model()
        config = _vi_config(cfg, ex.SQUARE_WAVE_VI)
    chain_cfg = _chain_config(cfg)
    comp = ex.compare_vi_mcmc(dataset, spec, config, chain_cfg,
                              int(cfg.options.get("predictive_samples", 256)), chain_csv=out / "chain.csv")
    report.config["vi"] = asdict(config)
    report.config["chain"] = asdict(chain_cfg)
    report.activation_probabilities = comp.rho_vi
    report.noise = comp.noise
    report.comparison = comp.table()
    report.extra["max_abs_diff"] = comp.max_abs_diff
    write_trace_csv(out / "trace.csv", comp.trace, config.iterations)
    write_plot_csv(out / "plot.csv", dataset, comp.vi_mean, comp.vi_var)
    write_plot_csv(out / "plot_mcmc.csv", dataset, comp.mcmc_mean, comp.mcmc_var)
    report.files += ["chain.csv", "trace.csv", "plot.csv", "plot_mcmc.csv"]


def _tabular(cfg):
    o = cfg.options
    return ex.load_tabular(o.get("data"), o.get("target", "MEDV"), o.get("split_fraction", 0.8),
                           o.get("split_seed", 0))


def _benchmark_summary(data, bench, mask, ridge):
    idx = ex.mask_to_int(mask)
    return {"ridge_weight": ridge, "split_fraction": data.n_train / (data.n_train + len(data.test_idx)),
            "selected": [n for n, v in zip(data.names, mask) if v], "selected_rmse": bench.rmse[idx],
            "full_rmse": bench.rmse[-1], "best_rmse": float(bench.rmse.min()),
            "best": [n for n, v in zip(data.names, bench.best_mask()) if v],
            "percentile": bench.percentile(mask), "rank": bench.rank(mask), "models": len(bench.rmse)}


def _cmd_boston(cfg, out, report):
    data = _tabular(cfg)
    ridge = cfg.ridge_weight or ex.default_ridge(data)
    config = _vi_config(cfg, ex.BOSTON_VI)
    mask, rho, state = ex.gp_alps_select(data, config)
    bench = ex.enumerate_subsets(data, ridge, query_mask=mask)
    Path(out / "benchmark.json").write_text(json.dumps(_jsonable(bench.to_dict()), sort_keys=True) + "\n")
    report.config["vi"] = asdict(config)
    report.activation_probabilities = rho
    report.noise = state.noise
    report.benchmark = _benchmark_summary(data, bench, mask, ridge)
    report.extra["feature_names"] = data.names
    report.files.append("benchmark.json")


def _cmd_enumerate(cfg, out, report):
    data = _tabular(cfg)
    ridge = cfg.ridge_weight or ex.default_ridge(data)
    query = cfg.options.get("query")
    mask = None if query is None else np.array([n in query for n in data.names])
    bench = ex.enumerate_subsets(data, ridge, query_mask=mask)
    Path(out / "benchmark.json").write_text(json.dumps(_jsonable(bench.to_dict()), sort_keys=True) + "\n")
    counts, edges = bench.histogram()
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lower", "upper", "count"])
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    report.benchmark = _benchmark_summary(data, bench, mask if mask is not None else bench.best_mask(), ridge)
    report.files += ["benchmark.json", "histogram.csv"]


def find_reports(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise ReportError(f"run directory not found: {directory}")
    paths = sorted(directory.rglob(REPORT_NAME))
    if not paths:
        raise ReportError(f"no {REPORT_NAME} under {directory}")
    return paths


def summarise(directory):
    """Merge every report under ``directory`` into one summary dict."""
    directory = Path(directory)
    entries, comparisons, percentiles = [], [], []
    for path in find_reports(directory):
        rep = ExperimentReport.load(path)
        d = rep.to_dict()
        d.pop("metadata", None)
        d["path"] = str(path.relative_to(directory))
        entries.append(d)
        if rep.comparison:
            rows = [{"latent": r["latent"], "rho_vi": r["rho_vi"], "rho_mcmc": r["rho_mcmc"],
                     "abs_diff": abs(r["rho_vi"] - r["rho_mcmc"])} for r in rep.comparison]
            comparisons.append({"path": d["path"], "rows": rows,
                                "max_abs_diff": max(r["abs_diff"] for r in rows)})
        if rep.benchmark and rep.benchmark.get("percentile") is not None:
            percentiles.append({"path": d["path"], "percentile": rep.benchmark["percentile"]})
    return {"reports": entries, "comparisons": comparisons, "percentiles": percentiles}


def _cmd_report(cfg):
    directory = Path(cfg.options["directory"])
    summary = _jsonable(summarise(directory))
    (directory / SUMMARY_NAME).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


HANDLERS = {"train": _cmd_train, "gibbs": _cmd_gibbs, "compare": _cmd_compare,
            "square-wave": _cmd_square_wave, "mixture": _cmd_mixture, "boston": _cmd_boston,
            "enumerate": _cmd_enumerate}


def _summary_line(report: ExperimentReport):
    parts = [report.command, f"seed={report.seed}"]
    if report.activation_probabilities is not None:
        parts.append("rho=[" + " ".join(f"{r:.2f}" for r in report.activation_probabilities) + "]")
    if report.extra.get("max_abs_diff") is not None:
        parts.append(f"max|delta|={report.extra['max_abs_diff']:.3f}")
    if report.benchmark:
        parts.append(f"percentile={report.benchmark['percentile']:.2f}")
    return " ".join(parts)


def run(cfg: RunConfig):
    """Execute one configured run and return its report (None for ``report``)."""
    if cfg.command == "report":
        summary = _cmd_report(cfg)
        print(f"report: merged {len(summary['reports'])} report(s) into "
              f"{Path(cfg.options['directory']) / SUMMARY_NAME}")
        return None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    config = asdict(cfg)
    config.pop("out")
    report = ExperimentReport(command=cfg.command, seed=cfg.seed, config=config)
    HANDLERS[cfg.command](cfg, out, report)
    report.metadata = {"created": _dt.datetime.now(_dt.timezone.utc).isoformat()}
    report.save(out / REPORT_NAME)
    print(_summary_line(report))
    return report


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        run(parse_config(argv))
        return 0
    except ConfigError as err:
        print(f"gpalps: configuration error: {err}", file=sys.stderr)
        return 1
    except (NumericalError, NotPositiveDefiniteError, np.linalg.LinAlgError, FloatingPointError) as err:
        print(f"gpalps: numerical failure: {err}", file=sys.stderr)
        return 2
    except (OSError, ex.DataFormatError) as err:
        print(f"gpalps: I/O error: {err}", file=sys.stderr)
        return 3
    except ValueError as err:
        print(f"gpalps: configuration error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
