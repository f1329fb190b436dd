"""MCMC engine: Gibbs updates for latent stocks and process precisions,
adaptive block random-walk Metropolis for the process parameters."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammainc, gammaincinv, log_ndtr, ndtr, ndtri
from scipy.stats import qmc

from . import _kernels as K
from .likelihood import Assembly, StateSpaceProblem
from .model import PARAM_LOWER, PARAM_UPPER, STOCKS
from .ndlm import AffineTransition

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when a chain produces non-finite states or degenerate conditionals."""


@dataclass
class MCMCConfig:
    total_iterations: int = 10000
    burn_in: int = 2000
    block_refresh: int = 500
    proposal_scale: Optional[Sequence[float]] = None
    seed: int = 0
    chains: int = 1
    thin: int = 10
    block_threshold: float = 0.5
    adapt_target: float = 0.44
    precision_mode: str = "exact"
    bridge_variance: bool = True
    interior: str = "marginal"
    carry_states: bool = True

    def __post_init__(self):
        if not 0 <= self.burn_in < self.total_iterations:
            raise ValueError("burn_in must be smaller than total_iterations")
        if self.block_refresh <= 0 or self.thin <= 0 or self.chains < 1:
            raise ValueError("block_refresh, thin and chains must be positive")

    def scales(self, lower, upper) -> np.ndarray:
        if self.proposal_scale is None:
            return 0.02 * (np.asarray(upper) - np.asarray(lower))
        s = np.asarray(self.proposal_scale, dtype=float)
        if s.shape != (11,) or np.any(s <= 0):
            raise ValueError("proposal_scale needs 11 positive values")
        return s


@dataclass
class PriorSpec:
    param_bounds: np.ndarray = field(default_factory=lambda: np.column_stack([PARAM_LOWER, PARAM_UPPER]))
    init_mean: np.ndarray = field(default_factory=lambda: np.array([100.0, 9000.0, 100.0, 500.0, 11000.0]))
    init_precision: np.ndarray = field(default_factory=lambda: 1.0 / (0.1 * np.array(
        [100.0, 9000.0, 100.0, 500.0, 11000.0])) ** 2)
    # Jeffreys prior on each process precision, truncated to daily process sd
    # between these fractions of the stock's initial mean; None leaves it improper
    precision_sd_range: Optional[Tuple[float, float]] = (1e-4, 1.0)

    def __post_init__(self):
        self.param_bounds = np.asarray(self.param_bounds, dtype=float)
        self.init_mean = np.asarray(self.init_mean, dtype=float)
        self.init_precision = np.asarray(self.init_precision, dtype=float)
        if self.param_bounds.shape != (11, 2) or np.any(self.param_bounds[:, 0] >= self.param_bounds[:, 1]):
            raise ValueError("param_bounds must be 11 (lower, upper) pairs with lower < upper")
        if np.any(self.init_precision <= 0):
            raise ValueError("initial-condition precisions must be positive")
        if self.precision_sd_range is not None:
            lo, hi = map(float, self.precision_sd_range)
            if not 0 < lo < hi:
                raise ValueError("precision_sd_range needs 0 < low < high")
            self.precision_sd_range = (lo, hi)

    @property
    def precision_bounds(self) -> np.ndarray:
        """(5, 2) support of the process precisions."""
        if self.precision_sd_range is None:
            return np.tile([0.0, np.inf], (5, 1))
        lo, hi = self.precision_sd_range
        scale = np.abs(self.init_mean)
        return np.column_stack([1.0 / (hi * scale) ** 2, 1.0 / (lo * scale) ** 2])

    @property
    def lower(self) -> np.ndarray:
        return self.param_bounds[:, 0]

    @property
    def upper(self) -> np.ndarray:
        return self.param_bounds[:, 1]


@dataclass
class ChainOutput:
    param_samples: np.ndarray        # (iterations, 11)
    precision_samples: np.ndarray    # (iterations, 5)
    latent_samples: np.ndarray       # (kept, anchors, 5)
    latent_iterations: np.ndarray    # iteration index of each kept latent sample
    anchor_times: np.ndarray
    acceptance_rates: Dict[str, float]
    rng_seed: int
    burn_in: int
    wall_time: float = 0.0
    blocks: List[List[int]] = field(default_factory=list)

    def post_burn(self, what: str = "params") -> np.ndarray:
        if what == "params":
            return self.param_samples[self.burn_in:]
        if what == "precisions":
            return self.precision_samples[self.burn_in:]
        if what == "latent":
            return self.latent_samples[self.latent_iterations >= self.burn_in]
        raise ValueError(what)


# ----------------------------------------------------------------------
# Closed-form full conditionals for a single stock


def latent_conditional_interior(t: int, states, transitions: Sequence[AffineTransition], phi: float,
                                tau: Optional[float] = None, obs: Optional[float] = None) -> Tuple[float, float]:
    """(mean, precision) of an interior latent value given its neighbours.

    ``transitions[t - 1]`` maps ``C_{t-1}`` to ``C_t``; an observation adds its
    precision ``tau`` when ``obs`` is given.
    """
    x = np.asarray(states, dtype=float)
    if not 0 < t < len(x) - 1:
        raise ValueError("interior update needs 0 < t < T")
    cur, nxt = transitions[t - 1], transitions[t]
    prec = phi * (1.0 + nxt.a ** 2)
    num = phi * (cur.a * x[t - 1] + cur.b + nxt.a * (x[t + 1] - nxt.b))
    if obs is not None:
        prec += tau
        num += tau * obs
    if not prec > 0:
        raise NumericalError("non-positive conditional precision")
    return num / prec, prec


def gibbs_latent_interior(t, stock_states, transitions, phi, tau=None, obs=None, rng=None) -> float:
    mean, prec = latent_conditional_interior(t, stock_states, transitions, phi, tau, obs)
    rng = np.random.default_rng() if rng is None else rng
    return mean + rng.standard_normal() / np.sqrt(prec)


def latent_conditional_boundary(end: str, states, transitions: Sequence[AffineTransition], phi: float,
                                init_mean: float = 0.0, init_precision: float = 1.0,
                                tau: Optional[float] = None, obs: Optional[float] = None) -> Tuple[float, float]:
    """(mean, precision) for the initial (conjugate prior) or final latent value."""
    x = np.asarray(states, dtype=float)
    if end == "initial":
        first = transitions[0]
        prec = phi * first.a ** 2 + init_precision
        num = phi * first.a * (x[1] - first.b) + init_precision * init_mean
        if obs is not None:
            prec += tau
            num += tau * obs
    elif end == "final":
        last = transitions[len(x) - 2]
        prec = phi
        num = phi * (last.a * x[-2] + last.b)
        if obs is not None:
            prec += tau
            num += tau * obs
    else:
        raise ValueError("end must be 'initial' or 'final'")
    if not prec > 0:
        raise NumericalError("non-positive conditional precision")
    return num / prec, prec


def gibbs_latent_boundary(end, stock_states, transitions, phi, init_mean=0.0, init_precision=1.0,
                          tau=None, obs=None, rng=None) -> float:
    mean, prec = latent_conditional_boundary(end, stock_states, transitions, phi, init_mean,
                                             init_precision, tau, obs)
    rng = np.random.default_rng() if rng is None else rng
    return mean + rng.standard_normal() / np.sqrt(prec)


def precision_conditional(residuals, variance_multipliers=None) -> Tuple[float, float]:
    """Gamma (shape, rate) for a process precision under the Jeffreys prior."""
    r = np.asarray(residuals, dtype=float)
    if r.size < 1:
        raise ValueError("need at least one transition")
    v = np.ones_like(r) if variance_multipliers is None else np.asarray(variance_multipliers, dtype=float)
    rate = max(0.5 * float(np.sum(r * r / v)), 1e-12)
    return 0.5 * r.size, rate


def truncated_gamma(shape: float, rate: float, lower: float, upper: float, rng) -> float:
    """Gamma(shape, rate) draw restricted to [lower, upper] by inverse cdf."""
    if lower <= 0 and not np.isfinite(upper):
        return rng.gamma(shape, 1.0 / rate)
    fa = gammainc(shape, rate * lower) if lower > 0 else 0.0
    fb = gammainc(shape, rate * upper) if np.isfinite(upper) else 1.0
    if fb - fa < 1e-300:
        # all mass beyond one bound at double precision
        return float(lower if fa >= 1.0 - 1e-16 or rate * lower > shape else upper)
    v = gammaincinv(shape, fa + rng.random() * (fb - fa)) / rate
    return float(min(max(v, lower), upper))


def gibbs_precision(stock_states, transitions: Sequence[AffineTransition], rng=None,
                    variance_multipliers=None) -> float:
    x = np.asarray(stock_states, dtype=float)
    res = [x[t + 1] - (tr.a * x[t] + tr.b) for t, tr in enumerate(transitions[:len(x) - 1])]
    shape, rate = precision_conditional(res, variance_multipliers)
    rng = np.random.default_rng() if rng is None else rng
    return rng.gamma(shape, 1.0 / rate)


# ----------------------------------------------------------------------
# Truncated normal random-walk proposals


_QMC_POINTS = 4096


def _truncated_std_normal(a: float, b: float, u: float) -> float:
    """Inverse-cdf draw from N(0, 1) restricted to [a, b]."""
    if a > 0:
        return -_truncated_std_normal(-b, -a, 1.0 - u)
    pa, pb = ndtr(a), ndtr(b)
    z = ndtri(pa + u * (pb - pa)) if pb > pa else 0.5 * (a + b)
    return float(min(max(z, a), b))


class BlockProposal:
    """Truncated (multivariate) normal random walk on a box, with its normaliser."""

    def __init__(self, index: Sequence[int], cov, lower, upper, seed: int = 0):
        self.index = np.asarray(index, dtype=int)
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        self.lower = np.asarray(lower, dtype=float)[self.index]
        self.upper = np.asarray(upper, dtype=float)[self.index]
        self.chol = np.linalg.cholesky(self.cov)
        self.sd = np.sqrt(np.diag(self.cov))
        d = len(self.index)
        if d > 1:
            u = qmc.Sobol(d, scramble=True, seed=seed).random(_QMC_POINTS)
            self._z = ndtri(np.clip(u, 1e-12, 1 - 1e-12)) @ self.chol.T
        else:
            self._z = None

    def log_normaliser(self, centre) -> float:
        """log P(N(centre, cov) lies inside the box)."""
        c = np.asarray(centre, dtype=float)
        if len(self.index) == 1:
            hi = (self.upper[0] - c[0]) / self.sd[0]
            lo = (self.lower[0] - c[0]) / self.sd[0]
            # log(Phi(hi) - Phi(lo)) without cancellation
            if hi > 0 and lo < 0:
                return float(np.log1p(-np.exp(log_ndtr(-hi)) - np.exp(log_ndtr(lo))))
            if lo >= 0:
                return float(log_ndtr(-lo) + np.log1p(-np.exp(log_ndtr(-hi) - log_ndtr(-lo))))
            return float(log_ndtr(hi) + np.log1p(-np.exp(log_ndtr(lo) - log_ndtr(hi))))
        tail = np.exp(log_ndtr((self.lower - c) / self.sd)) + np.exp(log_ndtr((c - self.upper) / self.sd))
        if tail.sum() < 1e-12:
            return 0.0
        pts = c + self._z
        inside = np.all((pts >= self.lower) & (pts <= self.upper), axis=1).mean()
        return float(np.log(max(inside, 1.0 / _QMC_POINTS)))

    def sample(self, centre, rng, max_tries: int = 10000):
        c = np.asarray(centre, dtype=float)
        d = len(self.index)
        if d == 1:
            a = (self.lower[0] - c[0]) / self.sd[0]
            b = (self.upper[0] - c[0]) / self.sd[0]
            return np.array([c[0] + self.sd[0] * _truncated_std_normal(a, b, rng.random())])
        for _ in range(max_tries):
            prop = c + self.chol @ rng.standard_normal(d)
            if np.all(prop >= self.lower) and np.all(prop <= self.upper):
                return prop
        return None


def rwmh_params(current, log_target: Callable[[np.ndarray], float], blocks: Sequence[BlockProposal],
                rng, current_log_target: Optional[float] = None):
    """One sweep of truncated-normal random-walk Metropolis-Hastings over parameter blocks.

    Returns ``(params, log_target, accepted)`` with one acceptance flag per block.
    """
    theta = np.array(current, dtype=float)
    lt = log_target(theta) if current_log_target is None else current_log_target
    accepted = []
    for blk in blocks:
        sub = blk.sample(theta[blk.index], rng)
        if sub is None:
            accepted.append(False)
            continue
        prop = theta.copy()
        prop[blk.index] = sub
        lp = log_target(prop)
        log_ratio = lp - lt + blk.log_normaliser(theta[blk.index]) - blk.log_normaliser(sub)
        if np.log(rng.random()) < log_ratio:
            theta, lt = prop, lp
            accepted.append(True)
        else:
            accepted.append(False)
    return theta, lt, accepted


def correlation_blocks(samples, threshold: float = 0.5) -> List[List[int]]:
    """Connected components of the graph joining parameters with |corr| > threshold."""
    s = np.asarray(samples, dtype=float)
    d = s.shape[1]
    sd = s.std(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(s, rowvar=False) if s.shape[0] > 2 else np.eye(d)
    corr = np.where(np.isfinite(corr), corr, 0.0)
    corr[sd == 0, :] = 0.0
    corr[:, sd == 0] = 0.0
    parent = list(range(d))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(d):
        for j in range(i + 1, d):
            if abs(corr[i, j]) > threshold:
                parent[find(i)] = find(j)
    groups: Dict[int, List[int]] = {}
    for i in range(d):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values())


def block_covariance(samples, index, fallback_sd, ridge: float = 1e-10, floor_sd=None) -> np.ndarray:
    """Scaled empirical covariance of ``samples[:, index]``.

    Columns that did not move fall back to ``fallback_sd``; ``floor_sd`` bounds
    every marginal sd from below, which keeps a block that barely moved in one
    window from shrinking its own proposal to nothing in the next.
    """
    s = np.asarray(samples, dtype=float)[:, index]
    d = len(index)
    cov = np.atleast_2d(np.cov(s, rowvar=False)) if s.shape[0] > 1 else np.diag(np.asarray(fallback_sd)[index] ** 2)
    sd = np.sqrt(np.clip(np.diag(cov), 0, None))
    fb = np.asarray(fallback_sd, dtype=float)[index]
    bad = ~(sd > 0)
    sd = np.where(bad, fb, sd)
    if floor_sd is not None:
        sd = np.maximum(sd, np.asarray(floor_sd, dtype=float)[index])
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = cov / np.outer(np.where(bad, 1, sd), np.where(bad, 1, sd))
    corr = np.where(np.isfinite(corr), corr, 0.0)
    corr[bad, :] = 0.0
    corr[:, bad] = 0.0
    np.fill_diagonal(corr, 1.0)
    corr += ridge * np.eye(d)
    return (2.38 ** 2 / d) * corr * np.outer(sd, sd)


# ----------------------------------------------------------------------
# Chain driver


def _copy_assembly(src: Assembly, dst: Assembly) -> None:
    dst.g[:] = src.g
    dst.h[:] = src.h
    dst.u[:] = src.u
    dst.vb[:] = src.vb
    dst.const[:] = src.const
    dst.params = src.params
    dst.system = src.system
    dst.finite = src.finite
    dst.phi = None if src.phi is None else src.phi.copy()


class _LatentEngine:
    """Current assembly, residual buffers and Metropolis moves for one chain.

    With ``carry`` on, a proposal for the parameters (or, on grids with
    marginalized windows, for a precision) moves the latent path with it:
    the standardized position ``z = L'(x - m)`` of ``x`` inside its Gaussian
    conditional is kept fixed, so the accept ratio is that of the proposed
    quantity with the latent values integrated out.
    """

    def __init__(self, problem: StateSpaceProblem, carry: bool = False):
        self.p = problem
        self.carry = carry
        self.cur = problem.new_assembly()
        self.alt = problem.new_assembly()
        self.e = np.empty(problem.n_f)
        self.prec = np.empty(problem.n_f)
        self.e_alt = np.empty(problem.n_f)
        self.prec_alt = np.empty(problem.n_f)
        self.x_alt = np.empty(problem.n_x)
        self.z = np.empty(problem.n_x)
        self.gauss = self.gauss_alt = None
        self.tr_idx = [np.nonzero((problem.kind == 1) & (problem.stock == s))[0] for s in range(5)]
        self.data_idx = np.nonzero(problem.data_mask)[0]
        self.data_vb_stocks = [False] * 5

    def set_params(self, theta, phi):
        self.p.assemble(theta, self.cur, phi)
        if not self.cur.finite or not np.isfinite(self.cur.log_const):
            raise NumericalError("initial parameters give a non-finite model")
        self.data_vb_stocks = [bool(np.any(np.abs(self.cur.vb[self.data_idx, s]) > 0)) for s in range(5)]

    def _score(self, asm, x, phi, e, prec) -> float:
        out = self.p.evaluate(asm, x, phi, e, prec)
        return float(out.sum()) if self.carry else float(out[1] + out[2])

    def loglik(self, x, phi) -> float:
        """Score of the current state; with ``carry`` also fixes ``z``."""
        if not self.carry:
            return self._score(self.cur, x, phi, self.e, self.prec)
        self.gauss = self.p.conditional_gaussian(self.cur, phi)
        if self.gauss is None:
            raise NumericalError("latent conditional precision is not positive definite")
        L, m, ld = self.gauss
        K.band_mul_upper(L, x - m, self.z)
        return self._score(self.cur, x, phi, self.e, self.prec) - ld

    def _propose(self, x, phi) -> float:
        if not self.alt.finite:
            return -np.inf
        if not self.carry:
            return self._score(self.alt, x, phi, self.e_alt, self.prec_alt)
        self.gauss_alt = self.p.conditional_gaussian(self.alt, phi)
        if self.gauss_alt is None:
            return -np.inf
        L, m, ld = self.gauss_alt
        K.band_solve_upper(L, self.z, self.x_alt)
        self.x_alt += m
        return self._score(self.alt, self.x_alt, phi, self.e_alt, self.prec_alt) - ld

    def try_params(self, theta, x, phi) -> float:
        self.p.assemble(theta, self.alt, phi)
        return self._propose(x, phi)

    def try_precisions(self, x, phi) -> float:
        _copy_assembly(self.cur, self.alt)
        self.p.set_precisions(self.alt, phi)
        return self._propose(x, phi)

    def accept_alt(self, x):
        self.cur, self.alt = self.alt, self.cur
        self.e, self.e_alt = self.e_alt, self.e
        self.prec, self.prec_alt = self.prec_alt, self.prec
        if self.carry:
            x[:] = self.x_alt
            self.gauss, self.gauss_alt = self.gauss_alt, self.gauss

    def sweep(self, x, phi, rng):
        p = self.p
        p.evaluate(self.cur, x, phi, self.e, self.prec)
        wprec = p.weight * self.prec
        z = rng.standard_normal(p.n_x)
        bad = K.gibbs_sweep(x, self.cur.g, p.idx, self.e, wprec, p.sweep_order,
                            p.site_ptr, p.site_fac, p.site_slot, z)
        if bad >= 0:
            k, s = divmod(int(bad), 5)
            raise NumericalError(f"non-positive conditional precision at anchor {k}, stock {s}")
        if not np.all(np.isfinite(x)):
            raise NumericalError("latent states diverged to non-finite values")

    def gibbs_precisions(self, x, phi, rng, bounds):
        """Conjugate Gamma draw per stock; Metropolis-corrected when data terms depend on phi."""
        p = self.p
        e = self.e  # kept current by the sweep
        u = self.cur.u
        for s in range(5):
            idx = self.tr_idx[s]
            shape = 0.5 * len(idx)
            rate = max(0.5 * float(np.sum(u[idx] * e[idx] ** 2)), 1e-12)
            prop = truncated_gamma(shape, rate, bounds[s, 0], bounds[s, 1], rng)
            if self.data_vb_stocks[s]:
                d = self.data_idx
                vb = self.cur.vb[d]
                base = p.base[d]
                w = p.weight[d]
                inv = 1.0 / phi
                v_old = 1.0 / base + vb @ inv
                inv_new = inv.copy()
                inv_new[s] = 1.0 / prop
                v_new = 1.0 / base + vb @ inv_new
                ee = e[d] ** 2
                lr = np.sum(w * (-0.5 * np.log(v_new) - 0.5 * ee / v_new + 0.5 * np.log(v_old) + 0.5 * ee / v_old))
                if not np.log(rng.random()) < lr:
                    continue
            phi[s] = prop

    def metropolis_precisions(self, x, phi, log_step, rng, bounds) -> np.ndarray:
        """Random walk on log precision per stock (flat under the Jeffreys prior)."""
        acc = np.zeros(5, dtype=bool)
        lt = self.loglik(x, phi)
        for s in range(5):
            prop = phi.copy()
            prop[s] = phi[s] * np.exp(log_step[s] * rng.standard_normal())
            if not bounds[s, 0] <= prop[s] <= bounds[s, 1]:
                continue
            lp = self.try_precisions(x, prop)
            if np.log(rng.random()) < lp - lt:
                self.accept_alt(x)
                phi[s] = prop[s]
                lt = lp
                acc[s] = True
        return acc


def run_chain(problem: StateSpaceProblem, config: MCMCConfig, priors: PriorSpec, init_params,
              init_states, init_phi, seed, progress: Optional[Callable[[int], None]] = None) -> ChainOutput:
    """Run one chain: parameter blocks, latent Gibbs sweep, precision updates per iteration."""
    t_start = time.perf_counter()
    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    qmc_seed = int(ss.generate_state(1)[0])
    lower, upper = priors.lower, priors.upper
    theta = np.clip(np.asarray(init_params, dtype=float), lower, upper)
    x = problem.to_flat(init_states)
    phi_bounds = priors.precision_bounds
    phi = np.clip(np.asarray(init_phi, dtype=float), phi_bounds[:, 0], phi_bounds[:, 1])
    eng = _LatentEngine(problem, config.carry_states)
    eng.set_params(theta, phi)

    n_iter = config.total_iterations
    params_out = np.empty((n_iter, 11))
    phi_out = np.empty((n_iter, 5))
    keep = np.arange(0, n_iter, config.thin)
    latent_out = np.empty((len(keep), len(problem.anchors), 5))
    scales = config.scales(lower, upper).copy()
    log_scales = np.log(scales)
    phi_steps = np.full(5, 0.5)
    phi_acc = np.zeros(5)
    uni_acc = np.zeros(11)
    uni_tries = np.zeros(11)
    blk_acc: Dict[Tuple[int, ...], List[int]] = {}
    blocks: List[BlockProposal] = []
    block_sets: List[List[int]] = []
    refreshes = 0

    def log_target(th):
        if np.any(th < lower) or np.any(th > upper):
            return -np.inf
        return eng.try_params(th, x, phi)

    for it in range(n_iter):
        lt = eng.loglik(x, phi)
        if it < config.burn_in:
            gamma = 1.0 / (it + 1) ** 0.6
            for i in range(11):
                blk = BlockProposal([i], [[np.exp(2 * log_scales[i])]], lower, upper)
                theta_new, lt_new, acc = rwmh_params(theta, log_target, [blk], rng, lt)
                if acc[0]:
                    eng.accept_alt(x)
                    theta, lt = theta_new, lt_new
                uni_tries[i] += 1
                uni_acc[i] += acc[0]
                log_scales[i] += gamma * (float(acc[0]) - config.adapt_target)
        else:
            if it == config.burn_in or (it - config.burn_in) % config.block_refresh == 0:
                lo = max(0, config.burn_in - config.block_refresh) if refreshes == 0 else config.burn_in
                lo = min(lo, max(0, it - config.block_refresh))
                window = params_out[lo:it]
                if len(window) >= config.block_refresh:
                    block_sets = correlation_blocks(window, config.block_threshold)
                    # a marginal sd is never below the conditional sd, which the tuned steps measure
                    floor = np.exp(log_scales) / 2.38
                    covs = [block_covariance(window, b, np.exp(log_scales), floor_sd=floor) for b in block_sets]
                else:
                    # a short burn-in is mostly transient drift: keep the tuned univariate steps
                    block_sets = [[i] for i in range(11)]
                    covs = [[[np.exp(2 * log_scales[i])]] for i in range(11)]
                blocks = [BlockProposal(b, c, lower, upper, seed=qmc_seed + refreshes)
                          for b, c in zip(block_sets, covs)]
                refreshes += 1
            theta_new = theta
            for blk, bset in zip(blocks, block_sets):
                theta_new, lt_new, acc = rwmh_params(theta, log_target, [blk], rng, lt)
                if acc[0]:
                    eng.accept_alt(x)
                    theta, lt = theta_new, lt_new
                rec = blk_acc.setdefault(tuple(bset), [0, 0])
                rec[0] += acc[0]
                rec[1] += 1
        eng.sweep(x, phi, rng)
        if problem.has_marginal:
            acc = eng.metropolis_precisions(x, phi, phi_steps, rng, phi_bounds)
            phi_acc += acc
            if it < config.burn_in:
                phi_steps *= np.exp((acc - config.adapt_target) / (it + 1) ** 0.6)
        else:
            eng.gibbs_precisions(x, phi, rng, phi_bounds)
        params_out[it] = theta
        phi_out[it] = phi
        if it % config.thin == 0:
            latent_out[it // config.thin] = x.reshape(-1, 5)
        if progress is not None:
            progress(it)

    rates = {f"p{i + 1}": float(uni_acc[i] / uni_tries[i]) if uni_tries[i] else float("nan") for i in range(11)}
    if problem.has_marginal:
        rates.update({f"phi_{s}": float(a / n_iter) for s, a in zip(STOCKS, phi_acc)})
    for bset, (a, n) in blk_acc.items():
        rates["block:" + "+".join(f"p{i + 1}" for i in bset)] = a / n
    return ChainOutput(params_out, phi_out, latent_out, keep, problem.anchors.copy(), rates,
                       int(np.atleast_1d(seed)[0]) if np.ndim(seed) else int(seed), config.burn_in,
                       time.perf_counter() - t_start, [list(map(int, b)) for b in block_sets])


def chain_seeds(master_seed: int, chains: int) -> List[int]:
    return [int(v) for v in np.random.SeedSequence(master_seed).generate_state(chains, dtype=np.uint32)]


def initial_precisions(problem: StateSpaceProblem, params, states, floor: float = 1e-12) -> np.ndarray:
    """Conditional posterior mean of each process precision given a starting path.

    Each window's end is compared with the deterministic daily propagation of
    its start; residuals are scaled by the stock's own variance multiplier.
    """
    sys = problem.assemble(params).system
    x = np.asarray(states, dtype=float)
    ss = np.zeros(5)
    for i in range(problem.n_w):
        t0, t1 = int(problem.anchors[i]), int(problem.anchors[i + 1])
        c = x[i].copy()
        v = np.zeros(5)
        for k in range(t0, t1):
            c = sys.m[k] @ c + sys.offset[k]
            v = np.diag(sys.m[k]) ** 2 * v + 1.0
        ss += (x[i + 1] - c) ** 2 / v
    return 0.5 * problem.n_w / np.maximum(0.5 * ss, floor)


def run_mcmc(problem: StateSpaceProblem, config: MCMCConfig, priors: PriorSpec, inits: Sequence,
             jobs: int = 1) -> List[ChainOutput]:
    """Run ``config.chains`` chains, each from its own ``(params, states)`` start.

    Chain seeds derive from ``config.seed``; chains share no state and the
    result order follows the chain index regardless of ``jobs``.
    """
    if len(inits) != config.chains:
        raise ValueError(f"{config.chains} chains need {config.chains} starting points, got {len(inits)}")
    seeds = chain_seeds(config.seed, config.chains)
    starts = []
    for params, states in inits:
        phi0 = np.clip(initial_precisions(problem, params, states), 1e-12, 1e12)
        starts.append((params, states, phi0))
    if jobs == 1 or config.chains == 1:
        return [run_chain(problem, config, priors, p, s, f, seed) for (p, s, f), seed in zip(starts, seeds)]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=jobs)(delayed(run_chain)(problem, config, priors, p, s, f, seed)
                                 for (p, s, f), seed in zip(starts, seeds))


def write_chain(out: ChainOutput, path) -> None:
    from .model import PARAM_NAMES, STOCKS

    with open(path, "w", newline="") as fh:
        fh.write(",".join(["iteration", *PARAM_NAMES, *(f"phi_{s}" for s in STOCKS)]) + "\n")
        for i, (p, f) in enumerate(zip(out.param_samples, out.precision_samples)):
            fh.write(",".join([str(i), *map(repr, map(float, p)), *map(repr, map(float, f))]) + "\n")


def read_chain(path) -> Tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1:12], data[:, 12:17]


def write_latent_summary(out: ChainOutput, path, level: float = 0.95) -> None:
    """Posterior mean and HPD bounds of every latent value on the grid."""
    from .diagnostics import hpd_columns
    from .model import STOCKS

    lat = out.post_burn("latent")
    mean = lat.mean(axis=0)
    bounds = hpd_columns(lat, level) if lat.shape[0] >= 100 else np.stack([lat.min(0), lat.max(0)], -1)
    with open(path, "w", newline="") as fh:
        cols = [f"{s}_{k}" for s in STOCKS for k in ("mean", "lo", "hi")]
        fh.write(",".join(["time", *cols]) + "\n")
        for k, t in enumerate(out.anchor_times):
            vals = [v for s in range(5) for v in (mean[k, s], bounds[k, s, 0], bounds[k, s, 1])]
            fh.write(",".join([str(int(t)), *map(repr, map(float, vals))]) + "\n")


def chain_manifest(out: ChainOutput, config: MCMCConfig) -> dict:
    cfg = asdict(config)
    if cfg["proposal_scale"] is not None:
        cfg["proposal_scale"] = [float(v) for v in cfg["proposal_scale"]]
    return {"config": cfg, "rng_seed": out.rng_seed, "acceptance_rates": out.acceptance_rates,
            "blocks": out.blocks, "wall_time_s": out.wall_time}
