"""DALECev process model: stock updates, fluxes, GPP hook, NEE and soil respiration.

Stocks are always stored in the order ``(cf, cw, cr, clit, csom)``; the same
order is used for rows and columns of the transition matrix.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

STOCKS = ("cf", "cw", "cr", "clit", "csom")
CF, CW, CR, CLIT, CSOM = range(5)

FLUXES = ("gpp", "ra", "af", "ar", "aw", "lf", "lw", "lr", "rlit", "rsom", "dlit", "nee", "sr")
FLUX_INDEX = {name: i for i, name in enumerate(FLUXES)}

PARAM_NAMES = tuple(f"p{i}" for i in range(1, 12))
PARAM_LOWER = np.array([1.1e-05, 0.2, 0.01, 0.01, 1e-04, 1e-06, 1e-06, 1e-06, 1e-06, 0.05, 2.0])
PARAM_UPPER = np.array([0.11, 0.7, 0.5, 0.5, 0.1, 0.01, 0.01, 1.0, 0.01, 0.2, 20.0])
# values used to generate the synthetic study data
SIM_PARAMS = np.array([0.002, 0.27, 0.15, 0.33, 0.00137, 1.1e-04, 0.00137, 0.1, 1.096e-05, 0.1725, 3.0])

DEFAULT_ROOT_FRAC = 0.3


class ConfigError(ValueError):
    """Raised for invalid user configuration or input files."""


@dataclass(frozen=True)
class ParameterVector:
    p1: float
    p2: float
    p3: float
    p4: float
    p5: float
    p6: float
    p7: float
    p8: float
    p9: float
    p10: float
    p11: float

    def __post_init__(self):
        values = self.as_array()
        bad = [n for n, v, lo, hi in zip(PARAM_NAMES, values, PARAM_LOWER, PARAM_UPPER)
               if not lo <= v <= hi]
        if bad:
            raise ValueError(f"parameters out of bounds: {', '.join(bad)}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    def __array__(self, dtype=None, copy=None):
        return self.as_array() if dtype is None else self.as_array().astype(dtype)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "ParameterVector":
        values = np.asarray(values, dtype=float)
        if values.shape != (11,):
            raise ValueError("expected 11 parameter values")
        return cls(*map(float, values))

    @classmethod
    def simulation_truth(cls) -> "ParameterVector":
        return cls.from_array(SIM_PARAMS)


def in_bounds(params, lower=PARAM_LOWER, upper=PARAM_UPPER) -> bool:
    p = np.asarray(params, dtype=float)
    return bool(np.all(p >= lower) and np.all(p <= upper))


@dataclass(frozen=True)
class StockVector:
    cf: float
    cw: float
    cr: float
    clit: float
    csom: float

    def as_array(self) -> np.ndarray:
        return np.array([self.cf, self.cw, self.cr, self.clit, self.csom], dtype=float)

    def __array__(self, dtype=None, copy=None):
        return self.as_array() if dtype is None else self.as_array().astype(dtype)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "StockVector":
        return cls(*map(float, np.asarray(values, dtype=float)))


@dataclass(frozen=True)
class FluxSet:
    gpp: float
    ra: float
    af: float
    ar: float
    aw: float
    lf: float
    lw: float
    lr: float
    rlit: float
    rsom: float
    dlit: float
    nee: float
    sr: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)


@dataclass(frozen=True)
class DriverRecord:
    day_index: int
    t_max: float
    t_min: float
    t_mean: float
    radiation: float
    co2: float
    gpp_override: Optional[float] = None

    def __post_init__(self):
        if not self.t_min <= self.t_mean <= self.t_max:
            raise ValueError("driver temperatures must satisfy t_min <= t_mean <= t_max")
        if self.radiation < 0 or self.co2 <= 0:
            raise ValueError("radiation must be >= 0 and co2 > 0")


@dataclass
class Drivers:
    """Daily driver series; row ``k`` drives the transition from day ``k`` to ``k + 1``."""

    day: np.ndarray
    t_max: np.ndarray
    t_min: np.ndarray
    t_mean: np.ndarray
    radiation: np.ndarray
    co2: np.ndarray
    gpp: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("day", "t_max", "t_min", "t_mean", "radiation", "co2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.gpp is not None:
            self.gpp = np.asarray(self.gpp, dtype=float)
        if np.any(np.diff(self.day) <= 0):
            raise ConfigError("driver days must be strictly increasing")

    def __len__(self) -> int:
        return len(self.day)

    def record(self, k: int) -> DriverRecord:
        return DriverRecord(int(self.day[k]), float(self.t_max[k]), float(self.t_min[k]),
                            float(self.t_mean[k]), float(self.radiation[k]), float(self.co2[k]),
                            None if self.gpp is None else float(self.gpp[k]))

    def head(self, n: int) -> "Drivers":
        return Drivers(self.day[:n], self.t_max[:n], self.t_min[:n], self.t_mean[:n],
                       self.radiation[:n], self.co2[:n], None if self.gpp is None else self.gpp[:n])

    @classmethod
    def from_records(cls, records: Sequence[DriverRecord]) -> "Drivers":
        gpp = None
        if all(r.gpp_override is not None for r in records):
            gpp = [r.gpp_override for r in records]
        return cls([r.day_index for r in records], [r.t_max for r in records],
                   [r.t_min for r in records], [r.t_mean for r in records],
                   [r.radiation for r in records], [r.co2 for r in records], gpp)


def read_drivers(path: Union[str, Path]) -> Drivers:
    """Read a driver CSV with header ``day,t_max,t_min,t_mean,radiation,co2[,gpp]``."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"driver file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        required = ["day", "t_max", "t_min", "t_mean", "radiation", "co2"]
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: missing driver columns {missing}")
        rows = list(reader)
    cols = {c: np.array([float(r[c]) for r in rows]) for c in required}
    gpp = None
    if "gpp" in (reader.fieldnames or []):
        gpp = np.array([float(r["gpp"]) for r in rows])
    return Drivers(gpp=gpp, **cols)


def write_drivers(drivers: Drivers, path: Union[str, Path]) -> None:
    header = ["day", "t_max", "t_min", "t_mean", "radiation", "co2"]
    if drivers.gpp is not None:
        header.append("gpp")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(drivers)):
            row = [int(drivers.day[k])] + [repr(float(getattr(drivers, c)[k])) for c in header[1:]]
            w.writerow(row)


def synthetic_drivers(n_days: int = 730, seed: int = 20200101) -> Drivers:
    """Seasonal daily weather loosely resembling a humid subtropical pine site."""
    rng = np.random.default_rng(seed)
    day = np.arange(1, n_days + 1)
    doy = (day - 1) % 365 + 1
    season = np.sin(2 * np.pi * (doy - 105) / 365.0)
    t_mean = 17.5 + 9.0 * season + rng.normal(0, 2.0, n_days)
    half_range = 5.5 + 1.0 * season + rng.uniform(-1.0, 1.0, n_days)
    radiation = np.clip(17.0 + 7.0 * np.sin(2 * np.pi * (doy - 80) / 365.0)
                        + rng.normal(0, 3.0, n_days), 1.0, None)
    co2 = np.full(n_days, 410.0)
    return Drivers(day, t_mean + half_range, t_mean - half_range, t_mean, radiation, co2)


@dataclass(frozen=True)
class ACMConfig:
    """Aggregated Canopy Model settings.

    ``mode='override'`` returns the driver GPP column verbatim. ``mode='acm'``
    evaluates the ACM with every constant fixed except the nitrogen use
    efficiency (p11). LAI is held fixed because G depends only on drivers and p11.
    """

    mode: str = "acm"
    lai: float = 4.0
    foliar_n: float = 2.7
    latitude: float = 32.95
    psid: float = -2.0
    rtot: float = 1.0
    a2: float = 0.0156935
    a3: float = 4.22273
    a4: float = 208.868
    a5: float = 0.0453194
    a6: float = 0.37836
    a7: float = 7.19298
    a8: float = 0.011136
    a9: float = 2.1001
    a10: float = 0.789798

    def __post_init__(self):
        if self.mode not in ("acm", "override"):
            raise ConfigError(f"unknown GPP mode {self.mode!r}")


def acm_gpp(p11: float, t_max, t_min, radiation, co2, day, cfg: ACMConfig) -> np.ndarray:
    t_max = np.asarray(t_max, dtype=float)
    trange = t_max - np.asarray(t_min, dtype=float)
    gs = abs(cfg.psid) ** cfg.a10 / (0.5 * trange + cfg.a6 * cfg.rtot)
    pp = p11 * cfg.lai * cfg.foliar_n * np.exp(cfg.a8 * t_max) / gs
    qq = cfg.a3 - cfg.a4
    ca = np.asarray(co2, dtype=float)
    ci = 0.5 * (ca + qq - pp + np.sqrt((ca + qq - pp) ** 2 - 4 * (ca * qq - pp * cfg.a3)))
    e0 = cfg.a7 * cfg.lai ** 2 / (cfg.lai ** 2 + cfg.a9)
    doy = (np.asarray(day, dtype=float) - 1) % 365 + 1
    dec = -23.4 * np.cos(np.deg2rad(360.0 * (doy + 10.0) / 365.0)) * np.pi / 180.0
    mult = np.tan(np.deg2rad(cfg.latitude)) * np.tan(dec)
    dayl = 24.0 * np.arccos(-np.clip(mult, -1.0, 1.0)) / np.pi
    rad = np.asarray(radiation, dtype=float)
    demand = gs * (ca - ci)
    with np.errstate(invalid="ignore", divide="ignore"):
        cps = np.where(rad > 0, e0 * rad * demand / (e0 * rad + demand), 0.0)
    return cps * (cfg.a2 * dayl + cfg.a5)


def gpp(driver: DriverRecord, p11: float, acm_config: ACMConfig = ACMConfig()) -> float:
    if acm_config.mode == "override":
        if driver.gpp_override is None:
            raise ConfigError("GPP override mode needs driver.gpp_override")
        return driver.gpp_override
    return float(acm_gpp(p11, driver.t_max, driver.t_min, driver.radiation, driver.co2,
                         driver.day_index, acm_config))


def gpp_series(drivers: Drivers, p11: float, acm_config: ACMConfig = ACMConfig()) -> np.ndarray:
    if acm_config.mode == "override":
        if drivers.gpp is None:
            raise ConfigError("GPP override mode needs a gpp column in the drivers")
        return drivers.gpp
    return acm_gpp(p11, drivers.t_max, drivers.t_min, drivers.radiation, drivers.co2,
                   drivers.day, acm_config)


def temperature_factor(p10: float, t_mean) -> np.ndarray:
    return np.exp(p10 * np.asarray(t_mean, dtype=float))


def flux_coefficients(params, t_mean, g, c_root_frac: float = DEFAULT_ROOT_FRAC):
    """Every flux as an affine function of the stocks.

    Returns ``(alpha, gamma)`` with shapes ``(..., 13, 5)`` and ``(..., 13)``
    such that ``fluxes = alpha @ stocks + gamma`` (broadcast over days).
    """
    p = np.asarray(params, dtype=float)
    q = temperature_factor(p[9], t_mean)
    g = np.asarray(g, dtype=float)
    shape = np.broadcast(q, g).shape
    q = np.broadcast_to(q, shape)
    g = np.broadcast_to(g, shape)
    alpha = np.zeros(shape + (13, 5))
    gamma = np.zeros(shape + (13,))
    npp = g * (1 - p[1])
    gamma[..., 0] = g
    gamma[..., 1] = g * p[1]
    gamma[..., 2] = npp * p[2]
    gamma[..., 3] = npp * (1 - p[2]) * p[3]
    gamma[..., 4] = npp * (1 - p[2]) * (1 - p[3])
    alpha[..., 5, CF] = p[4]
    alpha[..., 6, CW] = p[5]
    alpha[..., 7, CR] = p[6]
    rlit = 0.5 * q * p[0] * p[7]
    rsom = 0.5 * q * p[8]
    alpha[..., 8, CLIT] = rlit
    alpha[..., 9, CSOM] = rsom
    alpha[..., 10, CLIT] = 0.5 * q * p[0] * (1 - p[7])
    alpha[..., 11, CLIT] = rlit
    alpha[..., 11, CSOM] = rsom
    gamma[..., 11] = -npp
    alpha[..., 12, CLIT] = rlit
    alpha[..., 12, CSOM] = rsom
    gamma[..., 12] = -c_root_frac * g * p[1]
    return alpha, gamma


def compute_fluxes(state, driver: DriverRecord, params, c_root_frac: float = DEFAULT_ROOT_FRAC,
                   acm_config: ACMConfig = ACMConfig(), gpp_value: Optional[float] = None) -> FluxSet:
    """Evaluate all fluxes plus NEE and soil respiration for one day."""
    if not 0.0 <= c_root_frac <= 1.0:
        raise ValueError("c_root_frac must lie in [0, 1]")
    p = np.asarray(params, dtype=float)
    g = gpp(driver, p[10], acm_config) if gpp_value is None else gpp_value
    alpha, gamma = flux_coefficients(p, driver.t_mean, g, c_root_frac)
    return FluxSet(*(alpha @ np.asarray(state, dtype=float) + gamma))


def transition_matrix(params, driver: Union[DriverRecord, float], gpp_value: float):
    """Return ``(M, P)`` with ``E[C_t] = M @ C_{t-1} + P`` in stock order (cf, cw, cr, clit, csom).

    ``driver`` may be a :class:`DriverRecord` or just the day's mean temperature.
    """
    p = np.asarray(params, dtype=float)
    t_mean = driver.t_mean if isinstance(driver, DriverRecord) else float(driver)
    q = np.exp(p[9] * t_mean)
    m = np.zeros((5, 5))
    m[CF, CF] = 1 - p[4]
    m[CW, CW] = 1 - p[5]
    m[CR, CR] = 1 - p[6]
    m[CLIT, CF] = p[4]
    m[CLIT, CR] = p[6]
    m[CLIT, CLIT] = 1 - 0.5 * p[0] * q
    m[CSOM, CW] = p[5]
    m[CSOM, CLIT] = 0.5 * p[0] * (1 - p[7]) * q
    m[CSOM, CSOM] = 1 - 0.5 * p[8] * q
    npp = gpp_value * (1 - p[1])
    offset = np.array([npp * p[2], npp * (1 - p[2]) * (1 - p[3]), npp * (1 - p[2]) * p[3], 0.0, 0.0])
    return m, offset


def step_mean(state, driver: DriverRecord, params, gpp_value: float) -> StockVector:
    """Expected stocks one day later, computed from the individual fluxes."""
    c = np.asarray(state, dtype=float)
    f = compute_fluxes(c, driver, params, gpp_value=gpp_value)
    cf = c[CF] - f.lf + f.af
    cw = c[CW] - f.lw + f.aw
    cr = c[CR] - f.lr + f.ar
    clit = c[CLIT] - f.rlit - f.dlit + f.lf + f.lr
    csom = c[CSOM] - f.rsom + f.dlit + f.lw
    return StockVector(cf, cw, cr, clit, csom)


@dataclass
class DailySystem:
    """Vectorised daily dynamics for a whole driver series.

    ``m[k]`` and ``offset[k]`` give the transition from day ``k`` to ``k + 1``;
    ``alpha[k]``, ``gamma[k]`` give the fluxes of day ``k + 1`` as a function of
    the stocks on day ``k``.
    """

    m: np.ndarray
    offset: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    g: np.ndarray = field(repr=False)


def daily_system(params, drivers: Drivers, acm_config: ACMConfig = ACMConfig(),
                 c_root_frac: float = DEFAULT_ROOT_FRAC, g: Optional[np.ndarray] = None) -> DailySystem:
    """``g`` may pass a precomputed GPP series for the same ``p11``."""
    p = np.asarray(params, dtype=float)
    g = gpp_series(drivers, p[10], acm_config) if g is None else g
    q = np.exp(p[9] * drivers.t_mean)
    n = len(drivers)
    m = np.zeros((n, 5, 5))
    m[:, CF, CF] = 1 - p[4]
    m[:, CW, CW] = 1 - p[5]
    m[:, CR, CR] = 1 - p[6]
    m[:, CLIT, CF] = p[4]
    m[:, CLIT, CR] = p[6]
    m[:, CLIT, CLIT] = 1 - 0.5 * p[0] * q
    m[:, CSOM, CW] = p[5]
    m[:, CSOM, CLIT] = 0.5 * p[0] * (1 - p[7]) * q
    m[:, CSOM, CSOM] = 1 - 0.5 * p[8] * q
    npp = g * (1 - p[1])
    offset = np.zeros((n, 5))
    offset[:, CF] = npp * p[2]
    offset[:, CW] = npp * (1 - p[2]) * (1 - p[3])
    offset[:, CR] = npp * (1 - p[2]) * p[3]
    alpha, gamma = flux_coefficients(p, drivers.t_mean, g, c_root_frac)
    return DailySystem(m, offset, alpha, gamma, g)


def run_deterministic(initial, params, drivers: Drivers, acm_config: ACMConfig = ACMConfig()) -> np.ndarray:
    """Noise-free trajectory, shape ``(len(drivers) + 1, 5)``."""
    sys = daily_system(params, drivers, acm_config)
    out = np.empty((len(drivers) + 1, 5))
    out[0] = np.asarray(initial, dtype=float)
    for k in range(len(drivers)):
        out[k + 1] = sys.m[k] @ out[k] + sys.offset[k]
    return out


def warn_if_negative(states: np.ndarray, label: str = "trajectory") -> bool:
    neg = np.asarray(states) < 0
    if neg.any():
        warnings.warn(f"{label}: {int(neg.sum())} negative stock values", RuntimeWarning, stacklevel=2)
        return True
    return False
