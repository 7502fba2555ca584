"""Synthetic market generator with known ground truth.

One common factor with square-root stochastic variance and a deterministic
intraday seasonality multiplier drives all assets; each adds an independent
idiosyncratic diffusion.  Observations are sampled at Poisson times per
asset and diluted by MA(1) microstructure noise in observation index.
Times live on [0, 1] (one trading day); variances are per day.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import ObservationSeries, Panel
from .errors import ConfigError

TRADING_DAYS_PER_YEAR = 252.0


@dataclass(frozen=True)
class SimConfig:
    """Ground-truth model parameters.

    Factor variance follows dv = kappa (vbar - v) dt + xi sqrt(v) dW with
    Corr(dW, factor BM) = leverage; the factor diffusion coefficient is
    m(t) sqrt(v_t) with m the seasonality multiplier, normalized so that
    the integral of m^2 over the day is one.
    """

    d: int
    n_target: int
    seed: int
    kappa: float = 5.0
    vbar: float = 0.04 / TRADING_DAYS_PER_YEAR
    # stationary coefficient of variation 0.35: xi = 0.35 * sqrt(2 kappa vbar);
    # keeps the factor variance well away from zero (ratio metrics divide by it)
    xi: float = 0.35 * math.sqrt(2.0 * 5.0 * 0.04 / TRADING_DAYS_PER_YEAR)
    leverage: float = -0.5
    v0: float | None = None
    loadings: tuple[float, ...] = ()
    idio_vol: tuple[float, ...] = ()
    season_poly: tuple[float, ...] = (2.1, -4.2, 3.5)
    season_cos: tuple[float, ...] = (0.1,)
    season_sin: tuple[float, ...] = ()
    noise_variance: tuple[float, ...] = ()  # MA innovation variances omega^2
    noise_ma_coeff: tuple[float, ...] = ()
    poisson_intensity: tuple[float, ...] = ()
    base_log_price: float = math.log(100.0)
    euler_multiple: int = 10
    truth_points: int = 1024

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.n_target < 16:
            raise ConfigError("n_target must be >= 16")
        for name in ("loadings", "idio_vol", "noise_variance", "noise_ma_coeff", "poisson_intensity"):
            vals = getattr(self, name)
            if len(vals) != self.d:
                raise ConfigError(f"{name} must have d={self.d} entries, got {len(vals)}")
        if self.kappa < 0 or self.vbar <= 0 or self.xi < 0:
            raise ConfigError("variance dynamics need kappa >= 0, vbar > 0, xi >= 0")
        if any(abs(t) >= 1 for t in self.noise_ma_coeff):
            raise ConfigError("MA coefficients must lie in (-1, 1)")
        if any(lam <= 0 for lam in self.poisson_intensity):
            raise ConfigError("Poisson intensities must be positive")
        if any(w < 0 for w in self.noise_variance):
            raise ConfigError("noise variances must be >= 0")
        if self.euler_multiple < 10:
            raise ConfigError("euler grid must have at least 10 steps per expected observation")

    @property
    def noise_long_run(self) -> np.ndarray:
        """Population long-run noise variance omega^2 (1 + theta)^2 per asset."""
        w = np.asarray(self.noise_variance)
        th = np.asarray(self.noise_ma_coeff)
        return w * (1.0 + th) ** 2


def default_sim_config(
    d: int,
    n_target: int,
    seed: int,
    *,
    noise_signal_ratio: float = 1.5,
    ma_coeff: float = 0.5,
    nu_span: tuple[float, float] = (1.0, 0.4),
) -> SimConfig:
    """Calibrated defaults: loadings drawn once in [0.6, 1.4], idiosyncratic
    vol at 60% of the factor scale, U-shaped seasonality with open/close
    level about twice the daily average, per-observation noise-to-signal
    ratio 1.5 and observation intensities staggered over the nu span."""
    rng = np.random.default_rng([seed, 0x5107])
    loadings = tuple(rng.uniform(0.6, 1.4, size=d).tolist())
    vbar = 0.04 / TRADING_DAYS_PER_YEAR
    idio = tuple([0.45 * math.sqrt(vbar)] * d)
    nus = np.linspace(nu_span[0], nu_span[1], d) if d > 1 else np.array([nu_span[0]])
    intensities = tuple((n_target / nus).tolist())
    # per-asset expected integrated variance (seasonality normalized to 1)
    iv = np.array([b * b * vbar + g * g for b, g in zip(loadings, idio)])
    eta_target = noise_signal_ratio * iv / np.asarray(intensities)
    omega_sq = tuple((eta_target / (1.0 + ma_coeff) ** 2).tolist())
    return SimConfig(
        d=d,
        n_target=n_target,
        seed=seed,
        loadings=loadings,
        idio_vol=idio,
        noise_variance=omega_sq,
        noise_ma_coeff=tuple([ma_coeff] * d),
        poisson_intensity=intensities,
    )


@dataclass(frozen=True)
class SimOutput:
    """A simulated day: noisy panel plus the true covariance path."""

    panel: Panel
    truth_times: np.ndarray  # (T,)
    truth: np.ndarray  # (T, d, d)
    noise_truth: np.ndarray  # (d,) long-run noise variances
    vol_floor_events: int
    config: SimConfig = field(repr=False)
    clean: tuple[np.ndarray, ...] = ()  # efficient log-price at the sample times

    def __post_init__(self):
        diag = np.einsum("tpp->tp", self.truth)
        if np.any(diag < 0):
            raise ConfigError("truth covariance path has negative variances")


def _seasonal_multiplier(cfg: SimConfig, t: np.ndarray) -> np.ndarray:
    m = np.zeros_like(t)
    for k, c in enumerate(cfg.season_poly):
        m += c * t**k
    for k, c in enumerate(cfg.season_cos, start=1):
        m += c * np.cos(2.0 * math.pi * k * t)
    for k, c in enumerate(cfg.season_sin, start=1):
        m += c * np.sin(2.0 * math.pi * k * t)
    return m


def seasonal_fn(cfg: SimConfig, t: np.ndarray) -> np.ndarray:
    """Seasonality multiplier normalized so the day-integral of m^2 is 1."""
    grid = np.linspace(0.0, 1.0, 16385)
    raw = _seasonal_multiplier(cfg, grid)
    norm = math.sqrt(float(np.trapezoid(raw**2, grid)))
    if norm <= 0:
        raise ConfigError("seasonality multiplier must not vanish")
    return _seasonal_multiplier(cfg, np.asarray(t, dtype=float)) / norm


def _variance_path(
    cfg: SimConfig, dw: np.ndarray, dt: float
) -> tuple[np.ndarray, int]:
    """Full-truncation Euler path of the square-root variance process."""
    g = len(dw)
    v0 = cfg.vbar if cfg.v0 is None else cfg.v0
    if cfg.xi == 0.0 and (cfg.v0 is None or cfg.v0 == cfg.vbar):
        return np.full(g, v0), 0
    v = np.empty(g)
    kappa, vbar, xi = cfg.kappa, cfg.vbar, cfg.xi
    x = float(v0)
    floored = 0
    for i in range(g):
        v[i] = x if x > 0.0 else 0.0
        if x < 0.0:
            floored += 1
        xp = v[i]
        x = x + kappa * (vbar - xp) * dt + xi * math.sqrt(xp) * dw[i]
    return v, floored


def simulate(cfg: SimConfig, rng: np.random.Generator | None = None) -> SimOutput:
    """Generate one day of observations; deterministic for a fixed seed."""
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    d = cfg.d
    g = cfg.euler_multiple * cfg.n_target
    dt = 1.0 / g
    sq_dt = math.sqrt(dt)
    tgrid = np.arange(g) * dt  # left endpoints; coefficients are evaluated here

    dw_f = rng.standard_normal(g) * sq_dt
    dw_perp = rng.standard_normal(g) * sq_dt
    rho = cfg.leverage
    dw_v = rho * dw_f + math.sqrt(max(1.0 - rho * rho, 0.0)) * dw_perp

    v, floored = _variance_path(cfg, dw_v, dt)
    m = seasonal_fn(cfg, tgrid)
    factor_vol = m * np.sqrt(v)

    dx_factor = factor_vol * dw_f
    betas = np.asarray(cfg.loadings)
    gammas = np.asarray(cfg.idio_vol)
    dx = betas[None, :] * dx_factor[:, None]
    dx += gammas[None, :] * rng.standard_normal((g, d)) * sq_dt
    x = np.vstack([np.zeros(d), np.cumsum(dx, axis=0)])  # X at grid nodes 0..g

    # truth on a thinned subgrid, from the instantaneous coefficients
    t_idx = np.unique(np.linspace(0, g - 1, min(cfg.truth_points, g)).round().astype(int))
    fac_var = (factor_vol[t_idx]) ** 2
    truth = fac_var[:, None, None] * np.outer(betas, betas)[None, :, :]
    di = np.arange(d)
    truth[:, di, di] += gammas**2
    truth_times = tgrid[t_idx]

    series = []
    clean_paths: list[np.ndarray] = []
    for p in range(d):
        count = int(rng.poisson(cfg.poisson_intensity[p]))
        times = np.sort(rng.uniform(0.0, 1.0, size=count))
        times = np.concatenate([[0.0], times])
        times = times[np.concatenate([[True], np.diff(times) > 0])]
        n_obs = len(times)
        node = np.minimum((times * g).astype(int), g)  # X value at the step start
        clean = x[node, p]
        u = rng.standard_normal(n_obs + 1) * math.sqrt(cfg.noise_variance[p])
        eps = u[1:] + cfg.noise_ma_coeff[p] * u[:-1]
        clean_paths.append(cfg.base_log_price + clean)
        series.append(
            ObservationSeries(
                asset_id=f"A{p:02d}",
                times=times,
                log_prices=cfg.base_log_price + clean + eps,
            )
        )

    return SimOutput(
        panel=Panel(tuple(series)),
        truth_times=truth_times,
        truth=truth,
        noise_truth=cfg.noise_long_run,
        vol_floor_events=floored,
        config=cfg,
        clean=tuple(clean_paths),
    )


def spawn_rep_configs(cfg: SimConfig, reps: int) -> list[np.random.Generator]:
    """One independent generator per replication, derived from the master
    seed with SeedSequence.spawn so serial and parallel runs agree."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(reps)]


def constant_sigma_config(
    d: int,
    n_target: int,
    seed: int,
    *,
    noise_signal_ratio: float = 1.5,
    loadings: Sequence[float] | None = None,
) -> SimConfig:
    """Constant spot covariance and no leverage: flat seasonality, zero
    vol-of-vol.  Used by the coverage and rate experiments."""
    base = default_sim_config(d, n_target, seed, noise_signal_ratio=noise_signal_ratio)
    cfg = replace(
        base,
        xi=0.0,
        leverage=0.0,
        season_poly=(1.0,),
        season_cos=(),
        season_sin=(),
    )
    if loadings is not None:
        if len(loadings) != d:
            raise ConfigError("loadings length must equal d")
        cfg = replace(cfg, loadings=tuple(float(b) for b in loadings))
    return cfg
