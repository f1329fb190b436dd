"""Affine-Gaussian stock transitions and latent-state timestep coarsening."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .model import CF, CLIT, CR, CSOM, CW, STOCKS, ConfigError, DriverRecord, transition_matrix


@dataclass(frozen=True)
class AffineTransition:
    """``C_t ~ N(a * C_{t-1} + b, precision=phi)``."""

    a: float
    b: float
    phi: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("transition coefficients must be finite")
        if not self.phi > 0:
            raise ValueError("transition precision must be positive")


@dataclass(frozen=True)
class LatentGrid:
    anchor_times: tuple
    base_step_days: int = 1

    def __post_init__(self):
        t = np.asarray(self.anchor_times)
        object.__setattr__(self, "anchor_times", tuple(int(v) for v in t))
        if len(t) < 2 or t[0] != 0 or np.any(np.diff(t) <= 0):
            raise ValueError("anchor times must start at 0 and be strictly increasing")

    @property
    def horizon(self) -> int:
        return self.anchor_times[-1]

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self.anchor_times, dtype=int)

    def __len__(self) -> int:
        return len(self.anchor_times)

    @classmethod
    def daily(cls, horizon: int) -> "LatentGrid":
        return cls(tuple(range(horizon + 1)))

    @classmethod
    def monthly(cls, horizon: int) -> "LatentGrid":
        # twelve windows per 365 days, so year boundaries are anchors
        t = sorted({int(round(k * 365 / 12)) for k in range(int(horizon * 12 / 365) + 2)})
        t = [v for v in t if v < horizon] + [horizon]
        return cls(tuple(t))

    @classmethod
    def parse(cls, spec: str, horizon: int) -> "LatentGrid":
        """Parse ``daily``, ``monthly`` or ``explicit:[t0,t1,...]``."""
        spec = spec.strip()
        if spec == "daily":
            return cls.daily(horizon)
        if spec == "monthly":
            return cls.monthly(horizon)
        m = re.fullmatch(r"explicit:\[?([0-9,\s]+)\]?", spec)
        if m:
            times = [int(v) for v in m.group(1).replace(" ", "").split(",") if v]
            if times[-1] != horizon:
                raise ConfigError(f"explicit grid must end at the horizon {horizon}")
            return cls(tuple(times))
        raise ConfigError(f"unknown latent step specification {spec!r}")


def affine_coefficients(stock, params, driver: DriverRecord, other_stocks, gpp_value: float,
                        phi: float = 1.0) -> AffineTransition:
    """Coefficients of one stock's update with every other stock held fixed.

    Contributions of the other stocks (e.g. foliage and root turnover feeding
    litter) are folded into the offset.
    """
    s = STOCKS.index(stock) if isinstance(stock, str) else int(stock)
    m, offset = transition_matrix(params, driver, gpp_value)
    others = np.asarray(other_stocks, dtype=float).copy()
    others[s] = 0.0
    return AffineTransition(float(m[s, s]), float(offset[s] + m[s] @ others), phi)


def compose_transition(steps: Sequence[AffineTransition]) -> AffineTransition:
    """Exact composition of consecutive affine-Gaussian steps with a shared precision."""
    if len(steps) == 0:
        raise ValueError("cannot compose an empty list of transitions")
    phi = steps[0].phi
    if any(not np.isclose(s.phi, phi, rtol=1e-12, atol=0) for s in steps):
        raise ValueError("composition requires a common precision within the window")
    a_tot, b_tot, var = 1.0, 0.0, 0.0
    for s in steps:
        a_tot, b_tot, var = s.a * a_tot, s.a * b_tot + s.b, s.a ** 2 * var + 1.0
    return AffineTransition(a_tot, b_tot, phi / var)


def variance_multiplier(a: Sequence[float]) -> float:
    """``sum_k prod_{m>k} a_m**2``: window variance in units of the daily variance."""
    var = 0.0
    for v in a:
        var = v * v * var + 1.0
    return var


def coarsen(daily_transitions: Sequence[AffineTransition], grid: LatentGrid, mode: str = "exact",
            pooled_phi: Optional[float] = None) -> List[AffineTransition]:
    """Compose daily transitions (days 1..T) into one transition per grid window.

    ``mode='exact'`` keeps the exact window precision; ``mode='pooled'`` assigns
    every window the same free precision ``pooled_phi``.
    """
    if grid.horizon != len(daily_transitions):
        raise ValueError(f"grid ends at day {grid.horizon} but {len(daily_transitions)} daily transitions given")
    if mode not in ("exact", "pooled"):
        raise ValueError(f"unknown coarsening mode {mode!r}")
    if mode == "pooled" and pooled_phi is None:
        raise ValueError("pooled mode needs pooled_phi")
    out = []
    t = grid.anchor_times
    for lo, hi in zip(t[:-1], t[1:]):
        comp = compose_transition(daily_transitions[lo:hi])
        if mode == "pooled":
            comp = AffineTransition(comp.a, comp.b, pooled_phi)
        out.append(comp)
    return out


def chain_means(initial: float, transitions: Sequence[AffineTransition]) -> np.ndarray:
    out = [float(initial)]
    for tr in transitions:
        out.append(tr.a * out[-1] + tr.b)
    return np.asarray(out)


SWEEP_ORDER = (CF, CR, CW, CLIT, CSOM)
