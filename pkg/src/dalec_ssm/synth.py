"""Synthetic truth generation and observation-gap scenarios."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .likelihood import FLUX_SCENARIOS, ObservationSet
from .model import ACMConfig, FLUXES, SIM_PARAMS, STOCKS, Drivers, daily_system, write_drivers

DEFAULT_INIT_MEAN = np.array([100.0, 9000.0, 100.0, 500.0, 11000.0])


@dataclass
class NoiseDefaults:
    """Noise levels expressed as fractions of a reference magnitude."""

    init_sd_frac: float = 0.10   # initial-condition prior sd / prior mean
    process_sd_frac: float = 0.01  # daily process sd / prior mean
    obs_sd_frac: float = 0.05    # stock observation sd / prior mean
    flux_sd_frac: float = 0.10   # flux observation sd / mean |true flux|

    def init_precision(self, init_mean) -> np.ndarray:
        return 1.0 / (self.init_sd_frac * np.asarray(init_mean)) ** 2

    def process_precision(self, init_mean) -> np.ndarray:
        return 1.0 / (self.process_sd_frac * np.asarray(init_mean)) ** 2

    def tau(self, init_mean) -> np.ndarray:
        return 1.0 / (self.obs_sd_frac * np.asarray(init_mean)) ** 2

    def delta(self, truth_fluxes: np.ndarray) -> Dict[str, float]:
        scale = np.maximum(np.abs(truth_fluxes).mean(axis=0), 1e-8)
        return {name: float(1.0 / (self.flux_sd_frac * s) ** 2) for name, s in zip(FLUXES, scale)}


@dataclass
class Scenario:
    stock_frequency: str = "daily"
    flux_mask: str = "all"
    horizon_days: int = 730
    replicates: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.stock_frequency not in ("daily", "monthly", "annual"):
            raise ValueError(f"unknown stock frequency {self.stock_frequency!r}")
        if self.flux_mask not in FLUX_SCENARIOS:
            raise ValueError(f"unknown flux scenario {self.flux_mask!r}")
        if self.stock_frequency == "annual" and self.horizon_days % 365:
            raise ValueError("annual scenarios need a horizon that is a multiple of 365 days")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")


@dataclass
class Truth:
    states: np.ndarray   # (T + 1, 5)
    fluxes: np.ndarray   # (T, 13); row t - 1 holds the fluxes of day t
    params: np.ndarray
    phi: np.ndarray


def simulate_truth(params, drivers: Drivers, init_mean, init_precision, phi_true, seed,
                   acm_config: ACMConfig = ACMConfig()) -> Truth:
    """Draw initial stocks from their prior and propagate with daily process noise."""
    rng = np.random.default_rng(seed)
    p = np.asarray(params, dtype=float)
    phi = np.asarray(phi_true, dtype=float)
    sys = daily_system(p, drivers, acm_config)
    T = len(drivers)
    init_mean = np.asarray(init_mean, dtype=float)
    sd0 = 1.0 / np.sqrt(np.asarray(init_precision, dtype=float))
    x = np.empty((T + 1, 5))
    x[0] = init_mean + sd0 * rng.standard_normal(5)
    with np.errstate(divide="ignore"):
        sd = np.where(np.isinf(phi), 0.0, 1.0 / np.sqrt(phi))
    noise = rng.standard_normal((T, 5)) * sd
    fluxes = np.empty((T, 13))
    for k in range(T):
        fluxes[k] = sys.alpha[k] @ x[k] + sys.gamma[k]
        x[k + 1] = sys.m[k] @ x[k] + sys.offset[k] + noise[k]
    return Truth(x, fluxes, p, phi)


def stock_observation_times(frequency: str, horizon: int) -> np.ndarray:
    step = {"daily": 1, "monthly": 30, "annual": 365}[frequency]
    return np.arange(0, horizon + 1, step)


def observe(truth: Truth, tau, delta: Dict[str, float], scenario: Scenario, seed) -> ObservationSet:
    """Noisy observations under a data-gap scenario.

    Noise is drawn for every day and series before subsetting, so coarser
    scenarios keep exactly the values of finer ones for the same seed.
    """
    rng = np.random.default_rng(seed)
    tau = np.asarray(tau, dtype=float)
    T = truth.states.shape[0] - 1
    with np.errstate(divide="ignore"):
        stock_sd = np.where(np.isinf(tau), 0.0, 1.0 / np.sqrt(tau))
        flux_sd = np.array([0.0 if np.isinf(delta[f]) else 1.0 / np.sqrt(delta[f]) for f in FLUXES])
    stock_noisy = truth.states + rng.standard_normal(truth.states.shape) * stock_sd
    flux_noisy = truth.fluxes + rng.standard_normal(truth.fluxes.shape) * flux_sd
    times = stock_observation_times(scenario.stock_frequency, T)
    stock_obs = {name: (times.copy(), stock_noisy[times, s]) for s, name in enumerate(STOCKS)}
    days = np.arange(1, T + 1)
    flux_obs = {name: (days.copy(), flux_noisy[:, j]) for j, name in enumerate(FLUXES)
                if name in FLUX_SCENARIOS[scenario.flux_mask]}
    return ObservationSet(stock_obs, flux_obs, tau, dict(delta), flux_mask=FLUX_SCENARIOS[scenario.flux_mask])


@dataclass
class Dataset:
    truth: Truth
    obs: ObservationSet
    manifest: dict


def make_dataset(scenario: Scenario, drivers: Drivers, seed, params=SIM_PARAMS,
                 init_mean=DEFAULT_INIT_MEAN, noise: NoiseDefaults = NoiseDefaults(),
                 acm_config: ACMConfig = ACMConfig(), replicate: int = 0) -> Dataset:
    ss = np.random.SeedSequence(seed)
    truth_seed, obs_seed = ss.spawn(2)
    init_mean = np.asarray(init_mean, dtype=float)
    init_prec = noise.init_precision(init_mean)
    phi_true = noise.process_precision(init_mean)
    truth = simulate_truth(params, drivers.head(scenario.horizon_days), init_mean, init_prec, phi_true,
                           truth_seed, acm_config)
    tau = noise.tau(init_mean)
    delta = noise.delta(truth.fluxes)
    obs = observe(truth, tau, delta, scenario, obs_seed)
    manifest = {
        "replicate": replicate,
        "seed": int(seed) if np.isscalar(seed) else list(np.atleast_1d(seed)),
        "scenario": asdict(scenario),
        "params": dict(zip([f"p{i}" for i in range(1, 12)], map(float, params))),
        "phi_true": dict(zip(STOCKS, map(float, phi_true))),
        "init_mean": dict(zip(STOCKS, map(float, init_mean))),
        "init_precision": dict(zip(STOCKS, map(float, init_prec))),
        "tau": dict(zip(STOCKS, map(float, tau))),
        "delta": {k: float(v) for k, v in delta.items()},
        "acm": asdict(acm_config),
        "noise": asdict(noise),
    }
    return Dataset(truth, obs, manifest)


def replicate_seeds(master_seed: int, n: int) -> List[int]:
    children = np.random.SeedSequence(master_seed).generate_state(n, dtype=np.uint32)
    return [int(c) for c in children]


def generate_study(scenario: Scenario, drivers: Drivers, n_datasets: Optional[int] = None,
                   params=SIM_PARAMS, init_mean=DEFAULT_INIT_MEAN,
                   noise: NoiseDefaults = NoiseDefaults(),
                   acm_config: ACMConfig = ACMConfig()) -> List[Dataset]:
    n = scenario.replicates if n_datasets is None else n_datasets
    return [make_dataset(scenario, drivers, s, params, init_mean, noise, acm_config, replicate=i)
            for i, s in enumerate(replicate_seeds(scenario.seed, n))]


def write_truth(truth: Truth, path: Union[str, Path]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", *STOCKS, *FLUXES])
        for t in range(truth.states.shape[0]):
            fl = [""] * 13 if t == 0 else [repr(float(v)) for v in truth.fluxes[t - 1]]
            w.writerow([t, *(repr(float(v)) for v in truth.states[t]), *fl])


def read_truth(path: Union[str, Path], manifest: dict) -> Truth:
    rows = list(csv.DictReader(Path(path).open(newline="")))
    states = np.array([[float(r[s]) for s in STOCKS] for r in rows])
    fluxes = np.array([[float(r[f]) for f in FLUXES] for r in rows[1:]])
    params = np.array([manifest["params"][f"p{i}"] for i in range(1, 12)])
    phi = np.array([manifest["phi_true"][s] for s in STOCKS])
    return Truth(states, fluxes, params, phi)


def write_dataset(ds: Dataset, directory: Union[str, Path], drivers: Optional[Drivers] = None) -> Path:
    from .likelihood import write_observations

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_truth(ds.truth, d / "truth.csv")
    write_observations(ds.obs, d / "obs.csv")
    if drivers is not None:
        write_drivers(drivers, d / "drivers.csv")
    (d / "manifest.json").write_text(json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_dataset(directory: Union[str, Path]) -> Dataset:
    from .likelihood import read_observations

    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    tau = np.array([manifest["tau"][s] for s in STOCKS])
    obs = read_observations(d / "obs.csv", tau, manifest["delta"],
                            flux_mask=manifest["scenario"]["flux_mask"])
    return Dataset(read_truth(d / "truth.csv", manifest), obs, manifest)
