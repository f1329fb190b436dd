"""Observation models, the joint log-likelihood and data cloning."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import _kernels as K
from .model import (ACMConfig, ConfigError, DEFAULT_ROOT_FRAC, Drivers, FLUX_INDEX, FLUXES, STOCKS,
                    daily_system, gpp_series)
from .ndlm import LatentGrid, SWEEP_ORDER

# flux subsets available under each data scenario
FLUX_SCENARIOS = {
    "all": FLUXES,
    "neon_gpp": ("nee", "sr", "gpp"),
    "neon_nee": ("nee", "sr"),
}

# anchors (as stock indices) each stock's bridged path depends on
_STOCK_CLOSURE = {0: (0,), 1: (1,), 2: (2,), 3: (3, 0, 2), 4: (4, 1, 3, 0, 2)}


def _closure(stocks):
    out = set()
    for s in stocks:
        out.update(_STOCK_CLOSURE[s])
    return sorted(out)


@dataclass
class ObservationSet:
    """Sparse stock and flux observations with known precisions.

    ``stock_obs`` and ``flux_obs`` map a series name to ``(times, values)``.
    Stock observations live on days ``0..T``; a flux observed on day ``t``
    (``1..T``) is the flux computed from the stocks of day ``t - 1``.
    """

    stock_obs: Dict[str, Tuple[np.ndarray, np.ndarray]]
    flux_obs: Dict[str, Tuple[np.ndarray, np.ndarray]]
    tau: np.ndarray
    delta: Dict[str, float]
    clone_count: int = 1
    flux_mask: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float)
        if self.tau.shape != (5,) or np.any(self.tau <= 0):
            raise ValueError("tau must hold five positive precisions")
        for name, (t, v) in list(self.stock_obs.items()):
            if name not in STOCKS:
                raise ValueError(f"unknown stock series {name!r}")
            self.stock_obs[name] = (np.asarray(t, dtype=int), np.asarray(v, dtype=float))
        for name, (t, v) in list(self.flux_obs.items()):
            if name not in FLUX_INDEX:
                raise ValueError(f"unknown flux series {name!r}")
            if self.delta.get(name, 0) <= 0:
                raise ValueError(f"flux {name!r} needs a positive precision")
            self.flux_obs[name] = (np.asarray(t, dtype=int), np.asarray(v, dtype=float))
        if int(self.clone_count) < 1:
            raise ValueError("clone_count must be >= 1")
        self.clone_count = int(self.clone_count)

    @property
    def active_fluxes(self) -> Tuple[str, ...]:
        names = [f for f in FLUXES if f in self.flux_obs]
        if self.flux_mask is not None:
            names = [f for f in names if f in self.flux_mask]
        return tuple(names)

    def stock_times(self, stock: str) -> np.ndarray:
        return self.stock_obs.get(stock, (np.zeros(0, int), None))[0]

    def with_mask(self, mask: Union[str, Sequence[str], None]) -> "ObservationSet":
        if isinstance(mask, str):
            if mask not in FLUX_SCENARIOS:
                raise ConfigError(f"unknown flux scenario {mask!r}")
            mask = FLUX_SCENARIOS[mask]
        return replace(self, stock_obs=dict(self.stock_obs), flux_obs=dict(self.flux_obs),
                       flux_mask=None if mask is None else tuple(mask))


def clone(obs: ObservationSet, r: int) -> ObservationSet:
    """Data-cloned copy: equivalent to repeating every observation ``r`` times."""
    if int(r) != r or r < 1:
        raise ValueError("clone count must be a positive integer")
    return replace(obs, stock_obs=dict(obs.stock_obs), flux_obs=dict(obs.flux_obs), clone_count=int(r))


def write_observations(obs: ObservationSet, path: Union[str, Path]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "time", "value"])
        for name in STOCKS:
            if name in obs.stock_obs:
                for t, v in zip(*obs.stock_obs[name]):
                    w.writerow([name, int(t), repr(float(v))])
        for name in FLUXES:
            if name in obs.flux_obs:
                for t, v in zip(*obs.flux_obs[name]):
                    w.writerow([name, int(t), repr(float(v))])


def read_observations(path: Union[str, Path], tau, delta: Dict[str, float],
                      flux_mask=None) -> ObservationSet:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"observation file not found: {path}")
    rows: Dict[str, list] = {}
    with path.open(newline="") as fh:
        for r in csv.DictReader(fh):
            name = r["series"].strip().lower()
            if name not in STOCKS and name not in FLUX_INDEX:
                raise ConfigError(f"{path}: unknown series {name!r}")
            rows.setdefault(name, []).append((int(r["time"]), float(r["value"])))
    stock_obs, flux_obs = {}, {}
    for name, vals in rows.items():
        t, v = map(np.asarray, zip(*sorted(vals)))
        (stock_obs if name in STOCKS else flux_obs)[name] = (t, v)
    obs = ObservationSet(stock_obs, flux_obs, tau, dict(delta))
    return obs.with_mask(flux_mask) if flux_mask is not None else obs


@dataclass
class Assembly:
    """Factor coefficients for one parameter point (and, for marginalized
    windows, one precision vector)."""

    params: np.ndarray
    g: np.ndarray
    h: np.ndarray
    u: np.ndarray
    vb: np.ndarray
    finite: bool
    const: np.ndarray = None
    phi: Optional[np.ndarray] = None
    system: object = None

    @property
    def log_const(self) -> float:
        return float(self.const.sum()) if self.const is not None and self.const.size else 0.0


class StateSpaceProblem:
    """Linear-Gaussian factor representation of the full model on a latent grid.

    Latent values are stored flat as ``x[5 * k + s]`` for anchor ``k`` and
    stock ``s``. Factors are ordered: initial-state priors (5), one block per
    window, observations that sit on anchors, then window-interior
    observations.  A one-day window holds five transition rows.  Longer
    windows are handled by ``interior``:

    ``"marginal"``
        the daily states inside the window are integrated out exactly,
        leaving ten rows over the window's anchors that depend on the
        process precisions;
    ``"interpolate"``
        five composed transition rows, and in-window observations evaluated
        at the bridge interpolation of the anchors (optionally inflated by
        the bridge variance).
    """

    def __init__(self, obs: ObservationSet, drivers: Drivers, grid: LatentGrid,
                 init_mean, init_precision, acm_config: ACMConfig = ACMConfig(),
                 precision_mode: str = "exact", bridge_variance: bool = True,
                 c_root_frac: float = DEFAULT_ROOT_FRAC, interior: str = "marginal"):
        if grid.horizon != len(drivers):
            raise ConfigError(f"latent grid ends at day {grid.horizon} but drivers cover {len(drivers)} days")
        if precision_mode not in ("exact", "pooled"):
            raise ConfigError(f"unknown precision mode {precision_mode!r}")
        if interior not in ("marginal", "interpolate"):
            raise ConfigError(f"unknown interior treatment {interior!r}")
        if interior == "marginal" and precision_mode == "pooled":
            raise ConfigError("pooled window precisions need interior='interpolate'")
        self.obs = obs
        self.drivers = drivers
        self.grid = grid
        self.acm = acm_config
        self.c_root_frac = c_root_frac
        self.exact = precision_mode == "exact"
        self.bridge_variance = bridge_variance
        self.interior = interior
        self.init_mean = np.asarray(init_mean, dtype=float)
        self.init_precision = np.asarray(init_precision, dtype=float)
        self._gpp_cache = None
        self.anchors = grid.times.astype(np.int64)
        n_a = len(self.anchors)
        self.n_w = n_a - 1
        self.n_x = 5 * n_a
        T = grid.horizon
        anchor_pos = {int(t): k for k, t in enumerate(self.anchors)}
        r = obs.clone_count
        lengths = np.diff(self.anchors)
        collapsed = (lengths > 1) if interior == "marginal" else np.zeros(self.n_w, bool)
        self.collapsed_windows = np.nonzero(collapsed)[0].astype(np.int64)

        idx, kind, stock, y, base, weight = [], [], [], [], [], []
        for s in range(5):
            idx.append([s] + [-1] * 9)
            kind.append(0); stock.append(s); y.append(self.init_mean[s])
            base.append(self.init_precision[s]); weight.append(1.0)
        self.tr_row = np.full(self.n_w, -1, dtype=np.int64)
        self.win_row = np.full(self.n_w, -1, dtype=np.int64)
        for i in range(self.n_w):
            full = [5 * i + l for l in range(5)] + [5 * (i + 1) + l for l in range(5)]
            if collapsed[i]:
                self.win_row[i] = len(idx)
                for _ in range(10):
                    idx.append(full)
                    kind.append(4); stock.append(-1); y.append(0.0); base.append(1.0); weight.append(1.0)
                continue
            self.tr_row[i] = len(idx)
            for s in range(5):
                row = [-1] * 10
                for l in _closure([s]):
                    row[l] = 5 * i + l
                    row[5 + l] = 5 * (i + 1) + l
                idx.append(row)
                kind.append(1); stock.append(s); y.append(0.0); base.append(np.nan); weight.append(1.0)
        n_fixed = len(idx)

        interior_obs, inner = [], []
        for s, name in enumerate(STOCKS):
            if name not in obs.stock_obs:
                continue
            for t, v in zip(*obs.stock_obs[name]):
                t = int(t)
                if t < 0 or t > T:
                    raise ConfigError(f"stock observation at day {t} outside 0..{T}")
                if t in anchor_pos:
                    idx.append([5 * anchor_pos[t] + s] + [-1] * 9)
                    kind.append(2); stock.append(s); y.append(v); base.append(obs.tau[s]); weight.append(r)
                    continue
                i = int(np.searchsorted(self.anchors, t)) - 1
                j = t - self.anchors[i]
                if collapsed[i]:
                    inner.append((i, j, 0, s, v, obs.tau[s]))
                else:
                    interior_obs.append((i, 0, s, j, v, obs.tau[s], [s]))
        self.n_anchor_obs = len(idx) - n_fixed
        for name in obs.active_fluxes:
            jf = FLUX_INDEX[name]
            deps = {0: [], 1: [], 2: [], 3: [], 4: [], 5: [0], 6: [1], 7: [2], 8: [3], 9: [4],
                    10: [3], 11: [3, 4], 12: [3, 4]}[jf]
            for t, v in zip(*obs.flux_obs[name]):
                t = int(t)
                if t < 1 or t > T:
                    raise ConfigError(f"flux observation of {name} at day {t} outside 1..{T}")
                i = int(np.searchsorted(self.anchors, t)) - 1
                j = t - self.anchors[i]
                if collapsed[i]:
                    inner.append((i, j - 1, 1, jf, v, obs.delta[name]))
                else:
                    interior_obs.append((i, 1, jf, j, v, obs.delta[name], deps))
        interior_obs.sort(key=lambda e: e[0])
        self.win_ptr = np.zeros(self.n_w + 1, dtype=np.int64)
        for e in interior_obs:
            self.win_ptr[e[0] + 1] += 1
        self.win_ptr = np.cumsum(self.win_ptr).astype(np.int64)
        for i, knd, ser, j, v, prec, deps in interior_obs:
            row = [-1] * 10
            for l in _closure(deps):
                row[l] = 5 * i + l
                row[5 + l] = 5 * (i + 1) + l
            idx.append(row)
            kind.append(2 if knd == 0 else 3); stock.append(ser if knd == 0 else -1)
            y.append(v); base.append(prec); weight.append(r)
        self.d_kind = np.array([e[1] for e in interior_obs], dtype=np.int64)
        self.d_series = np.array([e[2] for e in interior_obs], dtype=np.int64)
        self.d_j = np.array([e[3] for e in interior_obs], dtype=np.int64)
        self.d_y = np.array([e[4] for e in interior_obs], dtype=float)

        # observations absorbed into marginalized windows, ordered by window then day
        pos = {int(i): w for w, i in enumerate(self.collapsed_windows)}
        inner.sort(key=lambda e: (pos[e[0]], e[1]))
        self.c_ptr = np.zeros(len(self.collapsed_windows) + 1, dtype=np.int64)
        for e in inner:
            self.c_ptr[pos[e[0]] + 1] += 1
        self.c_ptr = np.cumsum(self.c_ptr).astype(np.int64)
        self.c_j = np.array([e[1] for e in inner], dtype=np.int64)
        self.c_kind = np.array([e[2] for e in inner], dtype=np.int64)
        self.c_series = np.array([e[3] for e in inner], dtype=np.int64)
        self.c_y = np.array([e[4] for e in inner], dtype=float)
        self.c_prec = np.array([e[5] for e in inner], dtype=float)
        self.c_w = np.full(len(inner), float(r))
        self.c_row = self.win_row[self.collapsed_windows]

        self.idx = np.array(idx, dtype=np.int64)
        self.kind = np.array(kind, dtype=np.int64)
        self.stock = np.array(stock, dtype=np.int64)
        self.y = np.array(y, dtype=float)
        self.base = np.array(base, dtype=float)
        self.weight = np.array(weight, dtype=float)
        self.n_f = len(idx)
        self.d_slice = slice(n_fixed + self.n_anchor_obs, self.n_f)
        self.data_mask = (self.kind == 2) | (self.kind == 3)
        self.has_marginal = len(self.collapsed_windows) > 0

        # fixed coefficients of the single-entry factors
        self._g0 = np.zeros((self.n_f, 10))
        self._h0 = np.zeros(self.n_f)
        single = np.r_[0:5, n_fixed:n_fixed + self.n_anchor_obs]
        self._g0[single, 0] = 1.0
        self._h0[single] = -self.y[single]

        # incidence lists: factor/slot pairs touching each latent value
        f_ids, slots = np.nonzero(self.idx >= 0)
        sites = self.idx[f_ids, slots]
        order = np.argsort(sites, kind="stable")
        self.site_fac = f_ids[order].astype(np.int64)
        self.site_slot = slots[order].astype(np.int64)
        counts = np.bincount(sites, minlength=self.n_x)
        self.site_ptr = np.r_[0, np.cumsum(counts)].astype(np.int64)
        self.sweep_order = np.array([5 * k + s for k in range(n_a) for s in SWEEP_ORDER], dtype=np.int64)
        lo = np.where(self.idx >= 0, self.idx, self.n_x).min(axis=1)
        self.bandwidth = int((self.idx.max(axis=1) - lo).max())

    # ------------------------------------------------------------------
    def new_assembly(self) -> Assembly:
        return Assembly(np.full(11, np.nan), self._g0.copy(), self._h0.copy(), np.ones(self.n_f),
                        np.zeros((self.n_f, 5)), False, np.zeros(len(self.collapsed_windows)))

    def assemble(self, params, out: Optional[Assembly] = None, phi=None) -> Assembly:
        """Factor coefficients at ``params``; fills ``out`` in place when given.

        Marginalized windows also need the process precisions ``phi``; without
        them those rows are left for :meth:`set_precisions`.
        """
        p = np.asarray(params, dtype=float)
        asm = self.new_assembly() if out is None else out
        with np.errstate(all="ignore"):
            if self._gpp_cache is None or self._gpp_cache[0] != p[10]:
                self._gpp_cache = (p[10], gpp_series(self.drivers, p[10], self.acm))
            sys = daily_system(p, self.drivers, self.acm, self.c_root_frac, self._gpp_cache[1])
            K.assemble(self.anchors, sys.m, sys.offset, sys.alpha, sys.gamma, self.exact,
                       self.win_ptr, self.d_kind, self.d_series, self.d_j, self.d_y,
                       self.tr_row, self.d_slice.start, self.bridge_variance,
                       asm.g, asm.h, asm.u, asm.vb)
        asm.params = p.copy()
        asm.system = sys
        tr = self.kind == 1
        asm.finite = bool(np.isfinite(asm.h).all() and np.isfinite(asm.g).all()
                          and np.isfinite(asm.vb).all() and (asm.u[tr] > 0).all()
                          and np.isfinite(sys.m).all() and np.isfinite(sys.offset).all()
                          and np.isfinite(sys.alpha).all() and np.isfinite(sys.gamma).all())
        asm.phi = None
        if phi is not None:
            self.set_precisions(asm, phi)
        return asm

    def set_precisions(self, asm: Assembly, phi) -> Assembly:
        """Recompute the marginalized-window rows for process precisions ``phi``."""
        phi = np.asarray(phi, dtype=float)
        asm.phi = phi.copy()
        if not self.has_marginal:
            return asm
        if not (asm.finite and np.all(phi > 0) and np.all(np.isfinite(phi))):
            asm.const[:] = -np.inf
            return asm
        sys = asm.system
        with np.errstate(all="ignore"):
            try:
                K.collapse_windows(self.anchors, sys.m, sys.offset, sys.alpha, sys.gamma, phi,
                                   self.collapsed_windows, self.c_row, self.c_ptr, self.c_kind,
                                   self.c_series, self.c_j, self.c_y, self.c_prec, self.c_w,
                                   asm.g, asm.h, asm.const)
            except np.linalg.LinAlgError:
                asm.const[:] = -np.inf
        if not (np.isfinite(asm.const).all() and np.isfinite(asm.g).all() and np.isfinite(asm.h).all()):
            asm.const[:] = -np.inf
        return asm

    def _ready(self, asm: Assembly, phi) -> None:
        if self.has_marginal and (asm.phi is None or not np.array_equal(asm.phi, phi)):
            self.set_precisions(asm, phi)

    def precisions(self, asm: Assembly, phi) -> np.ndarray:
        """Per-factor precision for process precisions ``phi`` (daily, or pooled per window)."""
        out = np.empty(self.n_f)
        K.precisions(self.kind, self.stock, self.base, asm.u, asm.vb, np.asarray(phi, dtype=float), out)
        return out

    def residuals(self, asm: Assembly, x) -> np.ndarray:
        out = np.empty(self.n_f)
        K.residuals(asm.g, asm.h, self.idx, np.asarray(x, dtype=float), out)
        return out

    def evaluate(self, asm: Assembly, x, phi, e=None, prec=None) -> np.ndarray:
        """``[initial prior, process, data]`` log-density sums; fills ``e``/``prec`` if given."""
        e = np.empty(self.n_f) if e is None else e
        prec = np.empty(self.n_f) if prec is None else prec
        phi = np.asarray(phi, dtype=float)
        self._ready(asm, phi)
        with np.errstate(all="ignore"):
            out = K.evaluate(asm.g, asm.h, self.idx, np.asarray(x, dtype=float), self.kind, self.stock,
                             self.base, self.weight, asm.u, asm.vb, phi, e, prec)
        out[1] += asm.log_const
        if not asm.finite or not np.isfinite(out[1:]).all():
            out[1:] = -np.inf
        return out

    def factor_logdens(self, prec, e) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.weight * (0.5 * np.log(prec / (2 * np.pi)) - 0.5 * prec * e * e)

    def log_likelihood_parts(self, params, x, phi, asm: Optional[Assembly] = None):
        """``(process, data, initial_prior)`` log-density terms."""
        asm = self.assemble(params) if asm is None else asm
        prior, proc, data = self.evaluate(asm, x, phi)
        return float(proc), float(data), float(prior)

    def log_likelihood(self, params, x, phi, asm: Optional[Assembly] = None) -> float:
        proc, data, _ = self.log_likelihood_parts(params, x, phi, asm)
        return proc + data

    def conditional_gaussian(self, asm: Assembly, phi, out=None):
        """Band Cholesky factor, mean and log-determinant of the latent
        conditional given parameters and precisions; None if singular."""
        n, w = self.n_x, self.bandwidth + 1
        Q, L, b, m, y = (np.empty((n, w)), np.zeros((n, w)), np.empty(n), np.empty(n),
                         np.empty(n)) if out is None else out
        self._ready(asm, np.asarray(phi, dtype=float))
        if not np.isfinite(asm.log_const):
            return None
        wprec = self.weight * self.precisions(asm, phi)
        K.band_precision(asm.g, asm.h, self.idx, wprec, n, self.bandwidth, Q, b)
        if not K.band_cholesky(Q, L):
            return None
        K.band_solve_lower(L, -b, y)
        K.band_solve_upper(L, y, m)
        return L, m, float(np.log(L[:, 0]).sum())

    def to_flat(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if states.shape != (len(self.anchors), 5):
            raise ValueError(f"states must have shape ({len(self.anchors)}, 5)")
        return states.reshape(-1).copy()

    def to_states(self, x) -> np.ndarray:
        return np.asarray(x).reshape(len(self.anchors), 5)


def log_likelihood(states, params, precisions, obs: ObservationSet, drivers: Drivers,
                   grid: Optional[LatentGrid] = None, acm_config: ACMConfig = ACMConfig(),
                   precision_mode: str = "exact", bridge_variance: bool = True,
                   interior: str = "marginal") -> float:
    """Joint log-likelihood of latent states, parameters and process precisions.

    Sums the process transitions, the stock observations and the flux
    observations; the two observation parts are multiplied by the clone count.
    ``states`` has one row per grid anchor (daily grid if ``grid`` is None).
    """
    grid = LatentGrid.daily(len(drivers)) if grid is None else grid
    problem = StateSpaceProblem(obs, drivers, grid, np.ones(5), np.ones(5), acm_config,
                                precision_mode, bridge_variance, interior=interior)
    return problem.log_likelihood(params, problem.to_flat(states), precisions)
