"""Domain types, quote ingestion and block/frequency/window geometry.

Observation times live on the unit interval: ingestion maps the trading
day affinely so the open is 0.0 and the close is 1.0.  All downstream
formulas are stated on [0, 1].
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable, Literal, Sequence

import numpy as np

from .errors import ConfigError, DataError

Side = Literal["one_sided", "two_sided"]
PreMode = Literal["window", "per_block"]


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ObservationSeries:
    """One asset's sorted (time, log-price) samples on [0, 1].

    Attributes
    ----------
    asset_id : str
    times : ndarray
        Strictly increasing, within [0, 1].
    log_prices : ndarray
        Log mid-quotes, same length as ``times``.
    """

    asset_id: str
    times: np.ndarray
    log_prices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen_array(self.times))
        object.__setattr__(self, "log_prices", _frozen_array(self.log_prices))
        t, y = self.times, self.log_prices
        if t.ndim != 1 or y.ndim != 1 or len(t) != len(y):
            raise DataError(f"{self.asset_id}: times and log_prices must be 1-d and equally long")
        if len(t) < 2:
            raise DataError(f"{self.asset_id}: needs at least 2 observations, got {len(t)}")
        if not (np.all(np.diff(t) > 0)):
            raise DataError(f"{self.asset_id}: times must be strictly increasing")
        if t[0] < 0.0 or t[-1] > 1.0:
            raise DataError(f"{self.asset_id}: times must lie within [0, 1]")
        if not np.all(np.isfinite(y)):
            raise DataError(f"{self.asset_id}: non-finite log prices")

    @property
    def n_p(self) -> int:
        """Observation count."""
        return len(self.times)

    @property
    def returns(self) -> np.ndarray:
        return np.diff(self.log_prices)

    @property
    def return_midpoints(self) -> np.ndarray:
        """Interval midpoints (t_{i-1} + t_i) / 2, one per return."""
        return 0.5 * (self.times[1:] + self.times[:-1])


@dataclass(frozen=True)
class Panel:
    """A day's worth of observation series, one per asset."""

    series: tuple[ObservationSeries, ...]

    def __post_init__(self):
        object.__setattr__(self, "series", tuple(self.series))
        if len(self.series) < 1:
            raise DataError("panel needs at least one asset")
        ids = [s.asset_id for s in self.series]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate asset ids in panel")

    @property
    def d(self) -> int:
        return len(self.series)

    @property
    def n(self) -> int:
        """Observation count of the least liquid asset."""
        return min(s.n_p for s in self.series)

    @property
    def asset_ids(self) -> tuple[str, ...]:
        return tuple(s.asset_id for s in self.series)


@dataclass(frozen=True)
class EstimatorConfig:
    """Tuning constants for the spot estimator.

    Defaults follow the configuration used for the empirical estimates:
    theta_h=0.175, theta_j=7, theta_k=2, j_pre=5.
    """

    theta_h: float = 0.175
    theta_j: float = 7.0
    theta_k: float = 2.0
    delta: float = 0.01
    j_pre: int = 5
    side: Side = "two_sided"
    psd_projection: bool = True
    noise_lag_max: int = 15
    significance_alpha: float = 0.05
    pre_mode: PreMode = "window"

    def __post_init__(self):
        if not (self.theta_h > 0 and self.theta_j > 0 and self.theta_k > 0):
            raise ConfigError("theta_h, theta_j, theta_k must all be positive")
        if not (0 < self.delta < 0.25):
            raise ConfigError("delta must lie in (0, 1/4)")
        if self.j_pre < 1:
            raise ConfigError("j_pre must be >= 1")
        if self.side not in ("one_sided", "two_sided"):
            raise ConfigError(f"unknown side {self.side!r}")
        if self.noise_lag_max < 0:
            raise ConfigError("noise_lag_max must be >= 0")
        if self.pre_mode not in ("window", "per_block"):
            raise ConfigError(f"unknown pre_mode {self.pre_mode!r}")
        if not (0 < self.significance_alpha < 1):
            raise ConfigError("significance_alpha must lie in (0, 1)")


@dataclass(frozen=True)
class BlockGrid:
    """Block length, spectral cutoff and smoothing half-width."""

    h: float
    num_blocks: int
    J: int
    K: int

    def __post_init__(self):
        if not (0 < self.h <= 1):
            raise ConfigError(f"block length h={self.h} outside (0, 1]")
        if self.num_blocks < 1 or self.h * self.num_blocks < 1 - 1e-12:
            raise ConfigError("blocks must cover [0, 1]")
        if self.J < 1:
            raise ConfigError("spectral cutoff J must be >= 1")
        if self.K < 0:
            raise ConfigError("window half-width K must be >= 0")

    def block_of(self, s: float) -> int:
        """Block index of time s, the last instant belonging to the final block."""
        return min(max(int(math.floor(s / self.h)), 0), self.num_blocks - 1)

    def blocks_of(self, t: np.ndarray) -> np.ndarray:
        """Vectorized block_of."""
        idx = np.floor(np.asarray(t) / self.h).astype(np.int64)
        return np.clip(idx, 0, self.num_blocks - 1)

    def midpoints(self) -> np.ndarray:
        """Default evaluation grid: one point per block midpoint (clipped to [0,1])."""
        mids = (np.arange(self.num_blocks) + 0.5) * self.h
        return np.minimum(mids, 1.0)


def make_grid(config: EstimatorConfig, panel: Panel) -> BlockGrid:
    """Map sample size and tuning constants to the block geometry.

    h = theta_h * log(n) / sqrt(n) clipped to (0, 1];
    J = floor(theta_j * log(n)) capped at floor(n_min * h);
    K = ceil(theta_k * n^(1/4 - delta)).
    """
    n = panel.n
    if n < 16:
        raise ConfigError(f"needs n >= 16 observations per asset, got n={n}")
    h = min(config.theta_h * math.log(n) / math.sqrt(n), 1.0)
    num_blocks = math.ceil(1.0 / h)
    j_rate = math.floor(config.theta_j * math.log(n))
    j_cap = math.floor(n * h)
    J = max(1, min(j_rate, j_cap))
    K = math.ceil(config.theta_k * n ** (0.25 - config.delta))
    return BlockGrid(h=h, num_blocks=num_blocks, J=J, K=K)


def window_bounds(grid: BlockGrid, s: float, side: Side) -> tuple[int, int]:
    """Smoothing window (L, U) of block indices around (or up to) time s."""
    if not (0.0 <= s <= 1.0):
        raise ConfigError(f"evaluation time s={s} outside [0, 1]")
    b = grid.block_of(s)
    last = grid.num_blocks - 1
    if side == "two_sided":
        L = max(b - grid.K, 0)
        U = min(b + grid.K, last)
    elif side == "one_sided":
        L = max(b - 2 * grid.K, 0)
        U = min(b, last)
    else:
        raise ConfigError(f"unknown side {side!r}")
    return L, U


# ---------------------------------------------------------------------------
# Ingestion


@dataclass
class IngestReport:
    """Per-run ingestion diagnostics."""

    crossed_skipped: int = 0
    outside_window: int = 0
    duplicate_mids_dropped: int = 0
    nonmonotonic_dropped: int = 0
    retained: dict[str, int] = field(default_factory=dict)
    raw_counts: dict[str, int] = field(default_factory=dict)


QuoteRecord = tuple[str, float, float, float]


def ingest_quotes(
    records: Iterable[QuoteRecord],
    day_window: tuple[float, float],
) -> Panel:
    """Build a Panel of quote revisions from raw (asset, time, bid, ask) records.

    Mid-quotes are (bid+ask)/2 in levels; only revisions are kept (runs of
    equal mids collapse to their first record) and timestamps are mapped
    affinely so the day window becomes [0, 1].  Crossed quotes (bid > ask)
    and records outside the window are skipped.
    """
    panel, _ = ingest_quotes_with_report(records, day_window)
    return panel


def ingest_quotes_with_report(
    records: Iterable[QuoteRecord],
    day_window: tuple[float, float],
) -> tuple[Panel, IngestReport]:
    open_t, close_t = float(day_window[0]), float(day_window[1])
    if not (close_t > open_t):
        raise ConfigError(f"day window must satisfy open < close, got {day_window}")
    span = close_t - open_t

    report = IngestReport()
    by_asset: dict[str, list[tuple[float, float]]] = {}
    for asset_id, ts, bid, ask in records:
        ts = float(ts)
        bid = float(bid)
        ask = float(ask)
        report.raw_counts[asset_id] = report.raw_counts.get(asset_id, 0) + 1
        if bid > ask:
            report.crossed_skipped += 1
            continue
        if ts < open_t or ts > close_t:
            report.outside_window += 1
            continue
        mid = 0.5 * (bid + ask)
        if mid <= 0:
            raise DataError(f"{asset_id}: non-positive mid-quote {mid} at t={ts}")
        by_asset.setdefault(asset_id, []).append((ts, mid))

    series = []
    for asset_id in sorted(by_asset):
        rows = by_asset[asset_id]
        rows.sort(key=lambda r: r[0])
        times: list[float] = []
        logp: list[float] = []
        last_mid = None
        for ts, mid in rows:
            if last_mid is not None and mid == last_mid:
                report.duplicate_mids_dropped += 1
                continue
            t01 = (ts - open_t) / span
            if times and t01 <= times[-1]:
                report.nonmonotonic_dropped += 1
                continue
            times.append(t01)
            logp.append(math.log(mid))
            last_mid = mid
        if len(times) < 2:
            raise DataError(
                f"asset {asset_id!r} has fewer than 2 quote revisions after filtering"
            )
        report.retained[asset_id] = len(times)
        series.append(ObservationSeries(asset_id, times, logp))

    if not series:
        raise DataError("no usable records in input")
    return Panel(tuple(series)), report


# ---------------------------------------------------------------------------
# CSV input

_QUOTE_HEADER = ("asset_id", "timestamp", "bid", "ask")
_PRICE_HEADER = ("asset_id", "timestamp", "price")


def _parse_timestamp(raw: str) -> float:
    """Integer nanoseconds or ISO-8601 -> a float on a common per-file scale."""
    raw = raw.strip()
    try:
        return float(int(raw))
    except ValueError:
        pass
    iso = raw.replace("Z", "+00:00")
    try:
        return datetime.fromisoformat(iso).timestamp()
    except ValueError as exc:
        raise DataError(f"unparseable timestamp {raw!r}") from exc


def load_quote_csv(path: str) -> list[QuoteRecord]:
    """Read quote or single-price CSV into (asset, time, bid, ask) records.

    Formats are detected from the header: ``asset_id,timestamp,bid,ask``
    or ``asset_id,timestamp,price`` (price rows become bid = ask = price).
    Timestamps may be integer nanoseconds or ISO-8601 with at least
    millisecond precision; the format is detected per file.
    """
    records: list[QuoteRecord] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        header = tuple(col.strip().lower() for col in header)
        if header == _QUOTE_HEADER:
            price_only = False
        elif header == _PRICE_HEADER:
            price_only = True
        else:
            raise DataError(
                f"{path}: unrecognized header {header}; expected "
                f"{','.join(_QUOTE_HEADER)} or {','.join(_PRICE_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if price_only:
                    asset, ts, px = row
                    p = float(px)
                    records.append((asset.strip(), _parse_timestamp(ts), p, p))
                else:
                    asset, ts, bid, ask = row
                    records.append(
                        (asset.strip(), _parse_timestamp(ts), float(bid), float(ask))
                    )
            except (ValueError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: bad row {row!r} ({exc})") from exc
    return records


def render_records(
    panel: Panel, day_window: tuple[float, float] = (0.0, 1.0)
) -> list[QuoteRecord]:
    """Inverse of ingestion for round-trips: panel -> quote records."""
    open_t, close_t = day_window
    span = close_t - open_t
    out: list[QuoteRecord] = []
    for s in panel.series:
        for t, lp in zip(s.times, s.log_prices):
            px = math.exp(lp)
            out.append((s.asset_id, open_t + t * span, px, px))
    out.sort(key=lambda r: (r[1], r[0]))
    return out
