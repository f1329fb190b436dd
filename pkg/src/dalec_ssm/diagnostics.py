"""Chain diagnostics, interval coverage and data-cloning identifiability checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import gaussian_kde

from .model import STOCKS

LOG_ESS_CUTOFF = math.log(200.0)  # 5.30


def autocorrelation(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = len(x)
    d = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(d, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def ess(chain, return_flag: bool = False):
    """Effective sample size with the initial-positive-sequence truncation.

    A constant chain has no autocorrelation to estimate; it reports ``N``
    and, with ``return_flag``, a degeneracy flag.
    """
    x = np.asarray(chain, dtype=float)
    n = len(x)
    if n < 10:
        raise ValueError("ESS needs at least 10 samples")
    if np.ptp(x) == 0 or not np.isfinite(x).all():
        return (float(n), True) if return_flag else float(n)
    rho = autocorrelation(x)
    # Geyer: sum consecutive pairs while they stay positive
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    value = min(max(n / tau, 1e-12), float(n))
    return (value, False) if return_flag else value


def mean_log_ess(samples) -> float:
    """Average of log ESS over columns, e.g. the five precision chains."""
    s = np.atleast_2d(np.asarray(samples, dtype=float))
    if s.shape[0] < s.shape[1]:
        s = s.T
    return float(np.mean([np.log(ess(s[:, j])) for j in range(s.shape[1])]))


def gelman_rubin(chains) -> float:
    c = np.asarray(chains, dtype=float)
    if c.ndim != 2 or c.shape[0] < 2:
        raise ValueError("need at least two chains of equal length")
    m, n = c.shape
    if n < 10:
        raise ValueError("chains must have at least 10 samples")
    w = c.var(axis=1, ddof=1).mean()
    if not w > 0:
        raise ValueError("zero within-chain variance")
    b = n * c.mean(axis=1).var(ddof=1)
    return float(math.sqrt(((n - 1) / n * w + b / n) / w))


def hpd(samples, level: float = 0.95) -> Tuple[float, float]:
    """Shortest interval holding ``ceil(level * N)`` sorted samples."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = len(x)
    if n < 100:
        raise ValueError("HPD needs at least 100 samples")
    k = int(math.ceil(level * n))
    widths = x[k - 1:] - x[:n - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


def hpd_columns(samples, level: float = 0.95) -> np.ndarray:
    """HPD bounds along the first axis for every trailing index; shape ``(..., 2)``."""
    s = np.asarray(samples, dtype=float)
    n = s.shape[0]
    if n < 100:
        raise ValueError("HPD needs at least 100 samples")
    flat = np.sort(s.reshape(n, -1), axis=0)
    k = int(math.ceil(level * n))
    widths = flat[k - 1:] - flat[:n - k + 1]
    i = np.argmin(widths, axis=0)
    cols = np.arange(flat.shape[1])
    out = np.stack([flat[i, cols], flat[i + k - 1, cols]], axis=-1)
    return out.reshape(s.shape[1:] + (2,))


@dataclass
class CoverageReport:
    stock_coverage: Dict[str, float]
    precision_coverage: Dict[str, float]
    precision_pairs: float           # fraction over all replicate-stock pairs
    per_replicate: np.ndarray        # (replicates, 5) latent coverage

    @property
    def mean_stock_coverage(self) -> float:
        return float(np.mean(list(self.stock_coverage.values())))


def coverage(outputs: Sequence, truths: Sequence, level: float = 0.95) -> CoverageReport:
    """Latent-state and precision HPD coverage over replicates.

    ``outputs`` are chain outputs (post-burn-in samples are used); ``truths``
    supply ``states`` on the daily index and the true precisions ``phi``.
    """
    if len(outputs) != len(truths) or not outputs:
        raise ValueError("outputs and truths must be non-empty and matched one-to-one")
    per_rep, phi_hit = [], []
    for out, tr in zip(outputs, truths):
        times = np.asarray(out.anchor_times, dtype=int)
        states = np.asarray(tr.states)
        if times[-1] >= states.shape[0]:
            raise ValueError("truth does not cover the latent grid of its chain")
        lat = out.post_burn("latent")
        bounds = hpd_columns(lat, level)                      # (anchors, 5, 2)
        truth = states[times]
        inside = (truth >= bounds[..., 0]) & (truth <= bounds[..., 1])
        per_rep.append(inside.mean(axis=0))
        pb = hpd_columns(out.post_burn("precisions"), level)  # (5, 2)
        phi = np.asarray(tr.phi)
        phi_hit.append((phi >= pb[:, 0]) & (phi <= pb[:, 1]))
    per_rep = np.asarray(per_rep)
    phi_hit = np.asarray(phi_hit, dtype=float)
    return CoverageReport(dict(zip(STOCKS, map(float, per_rep.mean(axis=0)))),
                          dict(zip(STOCKS, map(float, phi_hit.mean(axis=0)))),
                          float(phi_hit.mean()), per_rep)


def bimodality_score(samples, min_peak_ratio: float = 0.1) -> float:
    """Depth of the deepest valley between two density modes, in [0, 1].

    A Gaussian kernel density estimate is scanned for local maxima; for every
    pair of modes whose smaller peak reaches ``min_peak_ratio`` of the largest,
    the score is ``1 - valley / smaller peak``.  Unimodal samples score 0.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if np.ptp(x) == 0:
        return 0.0
    kde = gaussian_kde(x)
    grid = np.linspace(x.min(), x.max(), 512)
    dens = kde(grid)
    peaks = [i for i in range(1, len(grid) - 1) if dens[i] >= dens[i - 1] and dens[i] > dens[i + 1]]
    top = dens.max()
    peaks = [i for i in peaks if dens[i] >= min_peak_ratio * top]
    best = 0.0
    for a, b in zip(peaks[:-1], peaks[1:]):
        valley = dens[a:b + 1].min()
        best = max(best, 1.0 - valley / min(dens[a], dens[b]))
    return float(best)


@dataclass
class IdentifiabilityVerdict:
    parameter: str
    verdict: str
    variance_ratio_by_r: Dict[int, float]
    modality_flag: bool
    sd_fraction: float = float("nan")
    bimodality: float = 0.0
    thresholds: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.verdict not in ("identifiable", "INE", "NI"):
            raise ValueError(f"unknown verdict {self.verdict!r}")


def classify(posteriors_by_r: Mapping[int, np.ndarray], bounds: Tuple[float, float], parameter: str = "",
             ratio_factor: float = 2.0, flat_fraction: float = 0.25,
             bimodality_threshold: float = 0.5) -> IdentifiabilityVerdict:
    """Data-cloning verdict for one parameter.

    * NI when the posterior at the largest ``r`` is multimodal;
    * identifiable when ``var(r_max) / var(1) <= ratio_factor / r_max``;
    * INE otherwise (variance does not shrink at the ``1/r`` rate); the
      reported ``sd_fraction`` shows whether it is also flat relative to the
      prior width (``> flat_fraction``).
    """
    rs = sorted(int(r) for r in posteriors_by_r)
    if len(rs) < 2 or rs[0] != 1:
        raise ValueError("need at least two cloning levels including r = 1")
    lo, hi = float(bounds[0]), float(bounds[1])
    r_max = rs[-1]
    var = {r: float(np.var(np.asarray(posteriors_by_r[r], dtype=float))) for r in rs}
    base = var[1] if var[1] > 0 else np.finfo(float).tiny
    ratios = {r: max(var[r] / base, np.finfo(float).tiny) for r in rs}
    top = np.asarray(posteriors_by_r[r_max], dtype=float)
    score = bimodality_score(top)
    multimodal = score > bimodality_threshold
    sd_frac = float(np.sqrt(var[r_max]) / (hi - lo))
    if multimodal:
        verdict = "NI"
    elif ratios[r_max] <= ratio_factor / r_max:
        verdict = "identifiable"
    else:
        verdict = "INE"
    return IdentifiabilityVerdict(parameter, verdict, ratios, multimodal, sd_frac, score,
                                  {"ratio_factor": ratio_factor, "flat_fraction": flat_fraction,
                                   "bimodality_threshold": bimodality_threshold})
