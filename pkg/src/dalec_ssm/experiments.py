"""Experiment configuration and end-to-end runs: simulate, fit, clone, summarize."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import diagnostics as D
from .initialization import InitStrategy, Initialization, initialize, write_initialization
from .likelihood import StateSpaceProblem, clone
from .model import (ACMConfig, ConfigError, PARAM_NAMES, STOCKS, Drivers, read_drivers,
                    synthetic_drivers)
from .ndlm import LatentGrid
from .sampler import (ChainOutput, MCMCConfig, PriorSpec, chain_manifest, run_mcmc, write_chain,
                      write_latent_summary)
from .synth import DEFAULT_INIT_MEAN, Dataset, NoiseDefaults, Scenario

BUNDLED_DRIVERS = Path(__file__).with_name("data") / "drivers_2yr.csv"


def default_drivers() -> Drivers:
    if BUNDLED_DRIVERS.exists():
        return read_drivers(BUNDLED_DRIVERS)
    return synthetic_drivers(730)


def _build(cls, data: Optional[dict]):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


@dataclass
class ExperimentConfig:
    scenario: Scenario = field(default_factory=Scenario)
    grid: str = "daily"
    mcmc: MCMCConfig = field(default_factory=MCMCConfig)
    init: InitStrategy = field(default_factory=InitStrategy)
    noise: NoiseDefaults = field(default_factory=NoiseDefaults)
    acm: ACMConfig = field(default_factory=ACMConfig)
    init_mean: tuple = tuple(DEFAULT_INIT_MEAN)
    clone_r: tuple = (1, 5, 25)
    drivers: Optional[str] = None
    out: str = "runs"

    def __post_init__(self):
        r = list(self.clone_r)
        if not r or r[0] != 1 or any(b <= a for a, b in zip(r[:-1], r[1:])):
            raise ConfigError("clone_r must be ascending and start at 1")
        if len(self.init_mean) != 5 or min(self.init_mean) <= 0:
            raise ConfigError("init_mean needs five positive values")
        if not (self.grid in ("daily", "monthly") or self.grid.startswith("explicit:")):
            raise ConfigError(f"unknown latent grid {self.grid!r}")

    @property
    def priors(self) -> PriorSpec:
        mu = np.asarray(self.init_mean, dtype=float)
        return PriorSpec(init_mean=mu, init_precision=self.noise.init_precision(mu))

    def load_drivers(self) -> Drivers:
        d = default_drivers() if self.drivers is None else read_drivers(self.drivers)
        if len(d) < self.scenario.horizon_days:
            raise ConfigError(f"drivers cover {len(d)} days but the horizon is {self.scenario.horizon_days}")
        return d.head(self.scenario.horizon_days)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        kw = {}
        for key, sub in (("scenario", Scenario), ("mcmc", MCMCConfig), ("init", InitStrategy),
                         ("noise", NoiseDefaults), ("acm", ACMConfig)):
            if key in data:
                kw[key] = _build(sub, data.pop(key))
        for key in ("init_mean", "clone_r"):
            if key in data:
                kw[key] = tuple(data.pop(key))
        unknown = set(data) - {"grid", "drivers", "out"}
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kw.update(data)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["init_mean"] = [float(v) for v in self.init_mean]
        d["clone_r"] = list(self.clone_r)
        return d


def load_config(path: Union[str, Path, None]) -> dict:
    """Read a JSON or TOML configuration file into a plain dict."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"configuration file not found: {p}")
    text = p.read_text()
    if p.suffix == ".toml":
        try:
            import tomllib
        except ImportError:  # Python < 3.11
            import tomli as tomllib

        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc


def merge(base: dict, overrides: dict) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for k, v in overrides.items():
        if v is None:
            continue
        if isinstance(v, dict):
            out[k] = merge(out.get(k, {}), v)
        else:
            out[k] = v
    return out


@dataclass
class FitResult:
    outputs: List[ChainOutput]
    inits: List[Initialization]
    problem: StateSpaceProblem
    grid: LatentGrid


def build_problem(dataset: Dataset, drivers: Drivers, cfg: ExperimentConfig, grid: Optional[LatentGrid] = None,
                  obs=None) -> StateSpaceProblem:
    T = dataset.truth.states.shape[0] - 1 if dataset.truth is not None else cfg.scenario.horizon_days
    grid = LatentGrid.parse(cfg.grid, T) if grid is None else grid
    pri = cfg.priors
    return StateSpaceProblem(dataset.obs if obs is None else obs, drivers.head(T), grid, pri.init_mean,
                             pri.init_precision, cfg.acm, cfg.mcmc.precision_mode, cfg.mcmc.bridge_variance,
                             interior=cfg.mcmc.interior)


def fit(dataset: Dataset, drivers: Drivers, cfg: ExperimentConfig, seed: int, jobs: int = 1,
        obs=None) -> FitResult:
    """Initialize and run ``cfg.mcmc.chains`` chains on one dataset."""
    problem = build_problem(dataset, drivers, cfg, obs=obs)
    grid = problem.grid
    T = grid.horizon
    init_seeds = np.random.SeedSequence([int(seed), 1]).spawn(cfg.mcmc.chains)
    data = problem.obs
    inits = [initialize(data, drivers.head(T), cfg.priors, cfg.init, s, grid, dataset.truth, cfg.acm)
             for s in init_seeds]
    mcmc = MCMCConfig(**{**asdict(cfg.mcmc), "seed": int(seed)})
    outs = run_mcmc(problem, mcmc, cfg.priors, [(i.params, i.states) for i in inits], jobs)
    return FitResult(outs, inits, problem, grid)


def summarize(outputs: Sequence[ChainOutput], truth=None) -> dict:
    """ESS, Gelman-Rubin and (when the truth is known) coverage for a set of chains."""
    res = {"chains": []}
    for out in outputs:
        prec = out.post_burn("precisions")
        par = out.post_burn("params")
        res["chains"].append({
            "log_ess_precision": dict(zip(STOCKS, (float(np.log(D.ess(prec[:, j]))) for j in range(5)))),
            "mean_log_ess_precision": D.mean_log_ess(prec),
            "ess_params": dict(zip(PARAM_NAMES, (D.ess(par[:, j]) for j in range(11)))),
            "posterior_mean_params": dict(zip(PARAM_NAMES, map(float, par.mean(axis=0)))),
            "posterior_mean_precision": dict(zip(STOCKS, map(float, prec.mean(axis=0)))),
            "acceptance_rates": out.acceptance_rates,
        })
    res["log_ess_cutoff"] = D.LOG_ESS_CUTOFF
    if len(outputs) > 1:
        par = np.stack([o.post_burn("params") for o in outputs])
        prec = np.stack([o.post_burn("precisions") for o in outputs])
        res["rhat_params"] = {n: _safe_rhat(par[:, :, j]) for j, n in enumerate(PARAM_NAMES)}
        res["rhat_precision"] = {n: _safe_rhat(prec[:, :, j]) for j, n in enumerate(STOCKS)}
    if truth is not None and min(len(o.post_burn("latent")) for o in outputs) >= 100:
        cov = D.coverage(list(outputs), [truth] * len(outputs))
        res["coverage"] = {"stocks": cov.stock_coverage, "precision": cov.precision_coverage,
                           "mean_stock": cov.mean_stock_coverage}
    return res


def _safe_rhat(chains) -> float:
    try:
        return D.gelman_rubin(chains)
    except ValueError:
        return float("nan")


def write_fit(result: FitResult, directory: Union[str, Path], cfg: ExperimentConfig, truth=None,
              extra: Optional[dict] = None) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifests = []
    for i, (out, init) in enumerate(zip(result.outputs, result.inits)):
        write_chain(out, d / f"chain_{i:02d}.csv")
        write_latent_summary(out, d / f"latent_{i:02d}.csv")
        write_initialization(init, d / f"init_{i:02d}.csv", result.grid)
        manifests.append({**chain_manifest(out, cfg.mcmc), "init_mode": init.mode})
    summary = summarize(result.outputs, truth)
    if "rhat_params" in summary:
        with (d / "rhat.csv").open("w") as fh:
            fh.write("quantity,rhat\n")
            for k, v in {**summary["rhat_params"], **{f"phi_{s}": v for s, v in
                                                       summary["rhat_precision"].items()}}.items():
                fh.write(f"{k},{v!r}\n")
    manifest = {"config": cfg.to_dict(), "grid": [int(t) for t in result.grid.times], "chains": manifests,
                **(extra or {})}
    (d / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    (d / "diagnostics.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    return summary


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


@dataclass
class CloneStudy:
    fits: Dict[int, FitResult]
    verdicts: Dict[str, D.IdentifiabilityVerdict]


def clone_study(dataset: Dataset, drivers: Drivers, cfg: ExperimentConfig, seed: int,
                parameters: Sequence[str] = PARAM_NAMES, jobs: int = 1) -> CloneStudy:
    """Fit the dataset cloned ``r`` times for each ``r`` in ``cfg.clone_r`` and classify parameters."""
    fits = {}
    for r in cfg.clone_r:
        fits[r] = fit(dataset, drivers, cfg, seed, jobs, obs=clone(dataset.obs, r))
    verdicts = {}
    lower, upper = cfg.priors.lower, cfg.priors.upper
    for name in parameters:
        j = PARAM_NAMES.index(name)
        post = {r: np.concatenate([o.post_burn("params")[:, j] for o in f.outputs]) for r, f in fits.items()}
        verdicts[name] = D.classify(post, (lower[j], upper[j]), name)
    return CloneStudy(fits, verdicts)


def write_verdicts(study: CloneStudy, directory: Union[str, Path]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rs = sorted(next(iter(study.verdicts.values())).variance_ratio_by_r) if study.verdicts else []
    with (d / "verdicts.csv").open("w") as fh:
        fh.write(",".join(["parameter", "verdict", "modality_flag", "bimodality", "sd_fraction",
                           *(f"var_ratio_r{r}" for r in rs)]) + "\n")
        for v in study.verdicts.values():
            fh.write(",".join([v.parameter, v.verdict, str(v.modality_flag), repr(v.bimodality),
                               repr(v.sd_fraction), *(repr(v.variance_ratio_by_r[r]) for r in rs)]) + "\n")
    with (d / "cloning_posteriors.csv").open("w") as fh:
        fh.write("r,parameter,mean,sd,hpd_lo,hpd_hi\n")
        for r, f in study.fits.items():
            par = np.concatenate([o.post_burn("params") for o in f.outputs])
            for j, name in enumerate(PARAM_NAMES):
                lo, hi = D.hpd(par[:, j]) if par.shape[0] >= 100 else (par[:, j].min(), par[:, j].max())
                fh.write(f"{r},{name},{par[:, j].mean()!r},{par[:, j].std()!r},{lo!r},{hi!r}\n")
