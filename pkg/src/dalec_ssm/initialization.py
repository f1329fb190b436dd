"""Starting values for the sampler: GP interpolation for short gaps, Latin
hypercube search scored by a bootstrap particle filter for long gaps."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import qmc
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import RBF, ConstantKernel, WhiteKernel

from .likelihood import ObservationSet
from .model import ACMConfig, FLUXES, PARAM_NAMES, STOCKS, Drivers, daily_system
from .ndlm import LatentGrid
from .sampler import PriorSpec

GAP_THRESHOLD_DAYS = 35


@dataclass
class InitStrategy:
    mode: str = "auto"           # gp | particle_filter | truth_debug | auto (gap rule)
    n_particles: int = 1000
    lhs_size: int = 200
    pf_precision_frac: float = 0.1
    gap_threshold: float = GAP_THRESHOLD_DAYS

    def __post_init__(self):
        if self.mode not in ("gp", "particle_filter", "truth_debug", "auto"):
            raise ValueError(f"unknown initialization mode {self.mode!r}")
        if self.n_particles < 10:
            raise ValueError("n_particles must be >= 10")
        if self.lhs_size < 11:
            raise ValueError("lhs_size must be >= 11")
        if not 0 < self.pf_precision_frac < 1:
            raise ValueError("pf_precision_frac must lie in (0, 1)")

    def resolve(self, obs: ObservationSet) -> str:
        if self.mode != "auto":
            return self.mode
        return "gp" if median_gap(obs) <= self.gap_threshold else "particle_filter"


def median_gap(obs: ObservationSet) -> float:
    gaps = [np.diff(np.sort(t)) for t, _ in obs.stock_obs.values() if len(t) > 1]
    if not gaps:
        return float("inf")
    return float(np.median(np.concatenate(gaps)))


def gp_interpolate(times, values, targets, nugget: Optional[float] = None, seed: int = 0) -> np.ndarray:
    """Posterior-mean interpolation with a squared-exponential kernel plus nugget.

    Hyperparameters are fit by maximizing the marginal likelihood; a fixed
    ``nugget`` (noise variance relative to the standardized data) pins the
    white-noise term instead.
    """
    t = np.asarray(times, dtype=float).reshape(-1, 1)
    y = np.asarray(values, dtype=float)
    if len(y) < 2:
        raise ValueError("GP interpolation needs at least two observations")
    span = max(float(np.ptp(t)), 1.0)
    gap = float(np.median(np.diff(np.sort(t.ravel())))) if len(y) > 1 else span
    ls0 = min(max(gap, 1.0), span)
    if nugget is None:
        noise = WhiteKernel(1e-2, (1e-8, 1e1))
    else:
        noise = WhiteKernel(max(nugget, 1e-12), "fixed")
    kernel = ConstantKernel(1.0, (1e-3, 1e3)) * RBF(ls0, (1.0, 10.0 * span)) + noise
    gp = GaussianProcessRegressor(kernel, alpha=1e-10, normalize_y=True,
                                  n_restarts_optimizer=2, random_state=seed)
    gp.fit(t, y)
    return gp.predict(np.asarray(targets, dtype=float).reshape(-1, 1))


def lhs_sample(bounds, n: int, seed) -> np.ndarray:
    """``n`` Latin hypercube points scaled into the given (lower, upper) pairs."""
    b = np.asarray(bounds, dtype=float)
    if n < 1:
        raise ValueError("n must be >= 1")
    u = qmc.LatinHypercube(d=b.shape[0], seed=np.random.default_rng(seed)).random(n)
    return qmc.scale(u, b[:, 0], b[:, 1])


def _dense_observations(obs: ObservationSet, horizon: int):
    stock_y = np.full((horizon + 1, 5), np.nan)
    for s, name in enumerate(STOCKS):
        if name in obs.stock_obs:
            t, v = obs.stock_obs[name]
            ok = (np.asarray(t) >= 0) & (np.asarray(t) <= horizon)
            stock_y[np.asarray(t)[ok].astype(int), s] = np.asarray(v)[ok]
    flux_y = np.full((horizon, 13), np.nan)
    delta = np.zeros(13)
    for j, name in enumerate(FLUXES):
        if name in obs.active_fluxes:
            t, v = obs.flux_obs[name]
            ok = (np.asarray(t) >= 1) & (np.asarray(t) <= horizon)
            flux_y[np.asarray(t)[ok].astype(int) - 1, j] = np.asarray(v)[ok]
            delta[j] = obs.delta[name]
    return stock_y, flux_y, delta


def _gauss_loglik(pred, y, prec, weight):
    """Sum over observed columns of Normal log densities; pred is (n, d)."""
    mask = ~np.isnan(y)
    if not mask.any():
        return np.zeros(pred.shape[0])
    d = pred[:, mask] - y[mask]
    p = prec[mask]
    return weight * (0.5 * np.sum(np.log(p / (2 * np.pi))) - 0.5 * (d * d) @ p)


def bootstrap_pf(params, data: ObservationSet, drivers: Drivers, strategy: InitStrategy = InitStrategy(),
                 seed=0, priors: PriorSpec = PriorSpec(), acm_config: ACMConfig = ACMConfig()
                 ) -> Tuple[np.ndarray, float]:
    """Bootstrap particle filter over the daily model.

    Returns the ancestral path of the highest-weight final particle, shape
    ``(T + 1, 5)``, and the log marginal likelihood estimate.
    """
    rng = np.random.default_rng(seed)
    T = len(drivers)
    n = strategy.n_particles
    sys = daily_system(np.asarray(params, dtype=float), drivers, acm_config)
    stock_y, flux_y, delta = _dense_observations(data, T)
    r = data.clone_count
    sd_proc = strategy.pf_precision_frac * np.abs(priors.init_mean)
    path = np.empty((T + 1, n, 5))
    anc = np.empty((T, n), dtype=np.int64)
    x = priors.init_mean + rng.standard_normal((n, 5)) / np.sqrt(priors.init_precision)
    logw = np.full(n, -np.log(n))
    loglik = 0.0

    def absorb(logw, ll, day):
        nonlocal loglik
        if not np.any(ll):
            return logw
        a = logw + ll
        inc = logsumexp(a)
        if not np.isfinite(inc):
            raise ValueError(f"particle filter: every particle has zero weight on day {day}")
        loglik += inc
        return a - inc

    logw = absorb(logw, _gauss_loglik(x, stock_y[0], data.tau, r), 0)
    path[0] = x
    for k in range(T):
        flux = x @ sys.alpha[k].T + sys.gamma[k]
        logw = absorb(logw, _gauss_loglik(flux, flux_y[k], delta, r), k + 1)
        idx = np.arange(n)
        if 1.0 / np.sum(np.exp(2 * logw)) < n / 2:
            idx = rng.choice(n, size=n, p=np.exp(logw - logsumexp(logw)))
            x = x[idx]
            logw = np.full(n, -np.log(n))
        anc[k] = idx
        x = x @ sys.m[k].T + sys.offset[k] + rng.standard_normal((n, 5)) * sd_proc
        logw = absorb(logw, _gauss_loglik(x, stock_y[k + 1], data.tau, r), k + 1)
        path[k + 1] = x
    best = int(np.argmax(logw))
    traj = np.empty((T + 1, 5))
    j = best
    for k in range(T, 0, -1):
        traj[k] = path[k, j]
        j = anc[k - 1, j]
    traj[0] = path[0, j]
    return traj, float(loglik)


@dataclass
class Initialization:
    params: np.ndarray
    states: np.ndarray        # on the latent grid, (anchors, 5)
    mode: str
    score: float = float("nan")
    candidates: Optional[np.ndarray] = None
    candidate_scores: Optional[np.ndarray] = None


def initialize(data: ObservationSet, drivers: Drivers, priors: PriorSpec, strategy: InitStrategy,
               seed, grid: Optional[LatentGrid] = None, truth=None,
               acm_config: ACMConfig = ACMConfig()) -> Initialization:
    """Parameter vector and latent trajectory to start a chain from."""
    T = len(drivers)
    grid = LatentGrid.daily(T) if grid is None else grid
    mode = strategy.resolve(data)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    if mode == "truth_debug":
        if truth is None:
            raise ValueError("truth_debug initialization needs the synthetic truth")
        return Initialization(np.asarray(truth.params, dtype=float).copy(),
                              np.asarray(truth.states)[grid.times].copy(), mode)
    if mode == "gp":
        rng = np.random.default_rng(ss)
        states = np.empty((len(grid), 5))
        for s, name in enumerate(STOCKS):
            t, v = data.stock_obs.get(name, (np.array([0]), priors.init_mean[s:s + 1]))
            if len(t) >= 2:
                states[:, s] = gp_interpolate(t, v, grid.times)
            else:
                states[:, s] = float(np.mean(v)) if len(v) else priors.init_mean[s]
        params = priors.lower + rng.random(11) * (priors.upper - priors.lower)
        return Initialization(params, states, mode)
    # particle filter over a Latin hypercube design
    design_seed, *pf_seeds = ss.spawn(strategy.lhs_size + 1)
    cands = lhs_sample(priors.param_bounds, strategy.lhs_size, design_seed)
    scores = np.full(len(cands), -np.inf)
    trajs = [None] * len(cands)
    for i, (c, s) in enumerate(zip(cands, pf_seeds)):
        try:
            trajs[i], scores[i] = bootstrap_pf(c, data, drivers, strategy, s, priors, acm_config)
        except (ValueError, FloatingPointError):
            continue
    if not np.isfinite(scores).any():
        raise ValueError("particle filter failed for every Latin hypercube candidate")
    best = int(np.argmax(scores))  # first index wins ties
    return Initialization(cands[best].copy(), trajs[best][grid.times].copy(), mode, float(scores[best]),
                          cands, scores)


def write_initialization(init: Initialization, path: Union[str, Path], grid: LatentGrid) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "index", *STOCKS])
        for name, v in zip(PARAM_NAMES, init.params):
            w.writerow(["param", name, repr(float(v)), "", "", "", ""])
        for t, row in zip(grid.times, init.states):
            w.writerow(["state", int(t), *(repr(float(v)) for v in row)])
