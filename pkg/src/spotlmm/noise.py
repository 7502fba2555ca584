"""Microstructure noise estimation: lag order, autocovariances, noise levels.

The noise process of each asset is R-dependent in observation index.
Return autocovariances gamma_u relate to noise autocovariances eta_u via

    gamma_u = 2*eta_u - eta_{u-1} - eta_{u+1},   u >= 1,

with the efficient-price contribution negligible at tick frequency.  With
eta_u = 0 for u > R this is a triangular system solved from u = R downward,
and the long-run noise variance is eta = eta_0 + 2*sum_{u<=R} eta_u.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import normal
from .data import BlockGrid, ObservationSeries, Panel
from .errors import DataError, NumericalError

LONG_RUN_FLOOR_FRAC = 1e-4  # floor for eta as a fraction of gamma_0


@dataclass(frozen=True)
class AssetNoise:
    """Noise summary of one asset (price-units squared)."""

    asset_id: str
    lag_order: int
    autocovariances: np.ndarray  # eta_u for u = 0..lag_order
    long_run: float
    floored: bool = False

    def __post_init__(self):
        if self.long_run <= 0:
            raise NumericalError(f"{self.asset_id}: long-run noise variance must be > 0")
        if len(self.autocovariances) != self.lag_order + 1:
            raise ValueError("autocovariances must have lag_order + 1 entries")


@dataclass(frozen=True)
class NoiseProfile:
    """Per-asset noise estimates for a panel."""

    assets: tuple[AssetNoise, ...]

    @property
    def long_run_vector(self) -> np.ndarray:
        return np.array([a.long_run for a in self.assets])

    @property
    def lag_orders(self) -> tuple[int, ...]:
        return tuple(a.lag_order for a in self.assets)


@dataclass(frozen=True)
class BlockNoiseLevel:
    """Diagonal of the block-wise noise level matrix H_k."""

    block: int
    diag: np.ndarray  # (d,)
    fallback: np.ndarray  # (d,) bool, True where the panel-average was substituted

    def __post_init__(self):
        if np.any(self.diag < 0) or not np.all(np.isfinite(self.diag)):
            raise NumericalError(f"invalid noise level in block {self.block}")


def return_autocovariance(series: ObservationSeries, u: int) -> float:
    """Sample autocovariance (1/(m-u)) sum_i r_i r_{i+u} of returns, lag u >= 0."""
    r = series.returns
    m = len(r)
    if u < 0:
        raise ValueError("lag must be >= 0")
    if m - u < 1:
        raise DataError(
            f"{series.asset_id}: series too short for lag {u} ({m} returns)"
        )
    if u == 0:
        return float(np.mean(r * r))
    return float(np.dot(r[:-u], r[u:]) / (m - u))


def _noise_from_return_autocovs(gammas: np.ndarray, R: int) -> np.ndarray:
    """Solve the triangular lag system for eta_0..eta_R.

    ``gammas`` holds return autocovariances for lags 0..R+1; lags above
    R+1 are identically zero under an R-dependent noise process.
    """
    eta = np.zeros(R + 3)
    for u in range(R, -1, -1):
        eta[u] = 2.0 * eta[u + 1] - eta[u + 2] - gammas[u + 1]
    return eta[: R + 1]


def estimate_noise(
    series: ObservationSeries,
    R: int,
    *,
    signal_correction: bool = False,
) -> tuple[np.ndarray, float]:
    """Recover noise autocovariances eta_0..eta_R and the long-run variance.

    Parameters
    ----------
    series : ObservationSeries
    R : int
        Noise lag order (0 means i.i.d. noise).
    signal_correction : bool
        Subtract a coarse-grid realized-variance share from gamma_0 before
        it is used for conditioning checks and floors.  Off by default:
        gamma_0 itself never enters the recovery (lags >= 1 do), and at
        tick frequency the signal share is negligible.

    Returns
    -------
    (eta, long_run) : autocovariance array of length R+1 and eta_0 + 2*sum eta_u.
    """
    if series.n_p <= 2 * R + 2:
        raise DataError(
            f"{series.asset_id}: needs more than {2 * R + 2} observations for R={R}"
        )
    gammas = np.array([return_autocovariance(series, u) for u in range(R + 2)])
    gamma0 = gammas[0]
    if signal_correction:
        gamma0 = gamma0 - _coarse_realized_variance(series) / max(len(series.returns), 1)
        gamma0 = max(gamma0, 0.0)
    eta = _noise_from_return_autocovs(gammas, R)
    if abs(eta[0]) < 1e-12 * abs(gammas[0]):
        raise NumericalError(
            f"{series.asset_id}: degenerate noise recovery at R={R}; try a smaller R"
        )
    long_run = float(eta[0] + 2.0 * np.sum(eta[1:]))
    if long_run <= 0:
        long_run = LONG_RUN_FLOOR_FRAC * abs(gamma0)
    if long_run <= 0:
        raise NumericalError(f"{series.asset_id}: cannot establish a positive noise level")
    return eta, long_run


def _coarse_realized_variance(series: ObservationSeries, target_returns: int = 78) -> float:
    """Realized variance on a sparse subgrid, a cheap integrated-variance proxy."""
    y = series.log_prices
    step = max(1, (len(y) - 1) // target_returns)
    coarse = y[::step]
    if len(coarse) < 2:
        coarse = y[[0, -1]]
    dr = np.diff(coarse)
    return float(np.sum(dr * dr))


def select_lag_order(series: ObservationSeries, r_max: int, alpha: float) -> int:
    """Smallest R whose higher-lag return autocovariances are all insignificant.

    Candidate R is accepted when |gamma_{u+1}| stays inside a Bartlett band
    for every u in (R, r_max].  The band uses a Bonferroni-adjusted normal
    quantile across the lags tested so that, for white noise, R_hat = 0 with
    probability about 1 - alpha regardless of r_max.
    """
    if r_max < 0:
        raise ValueError("r_max must be >= 0")
    if series.n_p <= 2 * r_max + 2:
        raise DataError(
            f"{series.asset_id}: needs more than {2 * r_max + 2} observations"
        )
    if r_max == 0:
        return 0
    m = len(series.returns)
    gammas = np.array([return_autocovariance(series, u) for u in range(r_max + 2)])
    gamma0 = gammas[0]
    if gamma0 <= 0:
        return 0
    ratios_sq = (gammas / gamma0) ** 2
    for R in range(0, r_max):
        n_tests = r_max - R
        z = normal.quantile(1.0 - alpha / (2.0 * n_tests))
        ok = True
        for u in range(R + 1, r_max + 1):
            c = 1.0 + 2.0 * float(np.sum(ratios_sq[1 : u + 1]))
            se = np.sqrt(gamma0 * gamma0 * c / m)
            if abs(gammas[u + 1]) > z * se:
                ok = False
                break
        if ok:
            return R
    return r_max


def estimate_profile(
    panel: Panel,
    r_max: int = 15,
    alpha: float = 0.05,
    *,
    signal_correction: bool = False,
) -> NoiseProfile:
    """Adaptive per-asset lag selection followed by noise recovery."""
    assets = []
    for series in panel.series:
        R = select_lag_order(series, r_max, alpha)
        eta, long_run = estimate_noise(series, R, signal_correction=signal_correction)
        floored = float(eta[0] + 2.0 * np.sum(eta[1:])) <= 0
        assets.append(
            AssetNoise(
                asset_id=series.asset_id,
                lag_order=R,
                autocovariances=eta,
                long_run=long_run,
                floored=bool(floored),
            )
        )
    return NoiseProfile(tuple(assets))


def block_noise_levels(
    panel: Panel, grid: BlockGrid, profile: NoiseProfile
) -> list[BlockNoiseLevel]:
    """Block-wise noise levels (eta_p / h) * sum of squared spacings in block.

    Blocks where an asset has fewer than 2 observations receive that
    asset's panel-average spacing sum instead and are flagged.
    """
    if len(profile.assets) != panel.d:
        raise ValueError("noise profile does not match panel dimension")
    B = grid.num_blocks
    d = panel.d
    diag = np.zeros((B, d))
    fallback = np.zeros((B, d), dtype=bool)
    eta = profile.long_run_vector
    for p, series in enumerate(panel.series):
        t = series.times
        sq = np.diff(t) ** 2
        obs_blocks = grid.blocks_of(t)
        spacing_blocks = obs_blocks[1:]  # block of t_i for spacing (t_i - t_{i-1})^2
        sums = np.bincount(spacing_blocks, weights=sq, minlength=B)
        counts = np.bincount(obs_blocks, minlength=B)
        avg_sum = float(np.sum(sq)) / B
        thin = counts < 2
        sums = np.where(thin, avg_sum, sums)
        diag[:, p] = (eta[p] / grid.h) * sums
        fallback[:, p] = thin
    return [BlockNoiseLevel(block=k, diag=diag[k], fallback=fallback[k]) for k in range(B)]
