"""Spot covariance matrix estimation from noisy, non-synchronous tick data.

The estimator partitions the trading day into blocks, de-correlates returns
with a sine basis per block, corrects the resulting empirical covariances
for microstructure noise and combines frequencies with Fisher-information
optimal weight matrices.  Local averages of the block estimates yield spot
covariances with feasible confidence bands; correlations and betas follow
by the delta method.
"""

__version__ = "0.1.0"

from .data import (
    BlockGrid,
    EstimatorConfig,
    ObservationSeries,
    Panel,
    ingest_quotes,
    make_grid,
    window_bounds,
)
from .lmm import SpotEstimate, psd_project, spot_estimate
from .noise import NoiseProfile, estimate_noise, select_lag_order

__all__ = [
    "BlockGrid",
    "EstimatorConfig",
    "NoiseProfile",
    "ObservationSeries",
    "Panel",
    "SpotEstimate",
    "estimate_noise",
    "ingest_quotes",
    "make_grid",
    "psd_project",
    "select_lag_order",
    "spot_estimate",
    "window_bounds",
]
