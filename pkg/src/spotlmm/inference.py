"""Feasible variance, confidence bands, spot correlations and betas.

The feasible variance matrix V is the window average of inverted
per-block aggregated Fisher informations.  Because the estimator is
symmetric, the sampling covariance of its vectorization is the symmetric
sandwich P V P / window_len with P the symmetrizer matrix; marginal bands
and delta-method variances for correlations and betas are read off that
matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import normal
from .errors import NumericalError
from .lmm import SpotEstimate

_BAND_TOL = 1e-8


def symmetrizer_cov(d: int) -> np.ndarray:
    """Cov(vec(ZZ')) for a standard normal d-vector Z: identity plus the
    commutation matrix, i.e. twice the symmetrizer."""
    if d < 1:
        raise ValueError("d must be >= 1")
    d2 = d * d
    out = np.eye(d2)
    idx = np.arange(d2)
    p, q = divmod(idx, d)
    out[idx, q * d + p] += 1.0
    return out


def _symmetrizer(d: int) -> np.ndarray:
    return 0.5 * symmetrizer_cov(d)


def avar_estimate(block_infos: Sequence[np.ndarray]) -> np.ndarray:
    """Window average of inverted block informations.

    Each element is either the aggregated information of one block
    (a d^2 x d^2 matrix, already summed over frequencies) or a sequence of
    per-frequency information matrices to be summed first.
    """
    inverses = []
    for info in block_infos:
        arr = np.asarray(info, dtype=float)
        if arr.ndim == 3:
            arr = arr.sum(axis=0)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError("block information must be square (or a stack of squares)")
        try:
            inverses.append(np.linalg.inv(arr))
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular block information in avar estimate") from exc
    if not inverses:
        raise ValueError("need at least one block")
    v = np.mean(inverses, axis=0)
    return 0.5 * (v + v.T)


def sampling_cov(vhat: np.ndarray, window_len: int) -> np.ndarray:
    """Covariance of vec(sigma_hat): P Vhat P / window_len (P the symmetrizer).

    For matrices commuting with the commutation matrix, the diagonal equals
    (Vhat_rr + Vhat_rr')/2 with r' the index of the transposed entry; a
    one-frequency chi-square calculation and the coverage experiments pin
    this normalization down.
    """
    d2 = vhat.shape[0]
    d = int(round(np.sqrt(d2)))
    if d * d != d2:
        raise ValueError("vhat must be d^2 x d^2")
    P = _symmetrizer(d)
    return P @ vhat @ P / window_len


@dataclass(frozen=True)
class PairStat:
    """Point estimate, delta-method variance and band for one derived scalar."""

    p: int  # 0-based asset indices
    q: int
    value: float
    avar: float
    lower: float
    upper: float


@dataclass(frozen=True)
class InferenceResult:
    estimate: SpotEstimate
    vhat: np.ndarray
    level: float
    sigma_lower: np.ndarray  # (d, d)
    sigma_upper: np.ndarray  # (d, d)
    correlations: tuple[PairStat, ...]  # one per requested unordered pair
    betas: tuple[PairStat, ...]  # ordered pairs: value = sigma_pq / sigma_pp

    def __post_init__(self):
        if not np.allclose(self.vhat, self.vhat.T, atol=_BAND_TOL * (1 + np.abs(self.vhat).max())):
            raise NumericalError("feasible variance matrix is not symmetric")


def corr_avar(sigma: np.ndarray, avar_mat: np.ndarray, p: int, q: int) -> float:
    """Delta-method variance of rho_pq = sigma_pq / sqrt(sigma_pp sigma_qq).

    ``avar_mat`` is the (co)variance matrix of vec(sigma_hat) in whatever
    normalization the caller uses; the result inherits it.
    """
    d = sigma.shape[0]
    spp, sqq, spq = sigma[p, p], sigma[q, q], sigma[p, q]
    if spp <= 0 or sqq <= 0:
        raise NumericalError(f"nonpositive variance for pair ({p}, {q})")
    rpq, rpp, rqq = p * d + q, p * d + p, q * d + q
    g_pq = 1.0 / np.sqrt(spp * sqq)
    g_pp = -spq / (2.0 * spp ** 1.5 * np.sqrt(sqq))
    g_qq = -spq / (2.0 * sqq ** 1.5 * np.sqrt(spp))
    return float(
        g_pq * g_pq * avar_mat[rpq, rpq]
        + g_pp * g_pp * avar_mat[rpp, rpp]
        + g_qq * g_qq * avar_mat[rqq, rqq]
        + 2.0 * g_pq * g_pp * avar_mat[rpq, rpp]
        + 2.0 * g_pq * g_qq * avar_mat[rpq, rqq]
        + 2.0 * g_pp * g_qq * avar_mat[rpp, rqq]
    )


def beta_avar(sigma: np.ndarray, avar_mat: np.ndarray, p: int, q: int) -> float:
    """Delta-method variance of beta_pq = sigma_pq / sigma_pp."""
    d = sigma.shape[0]
    spp, spq = sigma[p, p], sigma[p, q]
    if spp <= 0:
        raise NumericalError(f"nonpositive variance for asset {p}")
    rpq, rpp = p * d + q, p * d + p
    return float(
        avar_mat[rpq, rpq] / spp**2
        + spq * spq * avar_mat[rpp, rpp] / spp**4
        - 2.0 * spq * avar_mat[rpq, rpp] / spp**3
    )


def spot_correlation(
    estimate: SpotEstimate, vhat: np.ndarray, pairs: Sequence[tuple[int, int]] | None = None
) -> dict[tuple[int, int], tuple[float, float]]:
    """Correlations (clipped to [-1, 1]) and their delta-method variances.

    The variance is in the same per-window normalization as the band
    machinery: it uses the sampling covariance P Vhat P / window_len.
    """
    d = estimate.d
    if pairs is None:
        pairs = [(p, q) for p in range(d) for q in range(p + 1, d)]
    cov = sampling_cov(vhat, estimate.window_len)
    sigma = estimate.sigma
    out = {}
    for p, q in pairs:
        rho = sigma[p, q] / np.sqrt(sigma[p, p] * sigma[q, q])
        rho = float(np.clip(rho, -1.0, 1.0))
        out[(p, q)] = (rho, corr_avar(sigma, cov, p, q))
    return out


def spot_beta(
    estimate: SpotEstimate, vhat: np.ndarray, pairs: Sequence[tuple[int, int]] | None = None
) -> dict[tuple[int, int], tuple[float, float]]:
    """Betas sigma_pq / sigma_pp for ordered pairs and their variances."""
    d = estimate.d
    if pairs is None:
        pairs = [(p, q) for p in range(d) for q in range(d) if p != q]
    cov = sampling_cov(vhat, estimate.window_len)
    sigma = estimate.sigma
    out = {}
    for p, q in pairs:
        beta = float(sigma[p, q] / sigma[p, p])
        out[(p, q)] = (beta, beta_avar(sigma, cov, p, q))
    return out


def confidence_bands(
    estimate: SpotEstimate,
    vhat: np.ndarray,
    level: float,
    pairs: Sequence[tuple[int, int]] | None = None,
) -> InferenceResult:
    """Marginal (per-entry) confidence bands for covariances, correlations
    and betas at the given level."""
    if not (0.0 < level < 1.0):
        raise ValueError(f"level must lie in (0, 1), got {level}")
    d = estimate.d
    z = normal.quantile(0.5 * (1.0 + level))
    cov = sampling_cov(vhat, estimate.window_len)
    mvar = np.clip(np.diag(cov), 0.0, None).reshape(d, d)
    half = z * np.sqrt(mvar)
    sigma_lower = estimate.sigma - half
    sigma_upper = estimate.sigma + half

    if pairs is None:
        upper_pairs = [(p, q) for p in range(d) for q in range(p + 1, d)]
    else:
        upper_pairs = [(min(p, q), max(p, q)) for p, q in pairs]

    corr_stats = []
    for (p, q), (rho, av) in spot_correlation(estimate, vhat, upper_pairs).items():
        hw = z * np.sqrt(max(av, 0.0))
        corr_stats.append(
            PairStat(
                p=p,
                q=q,
                value=rho,
                avar=av,
                lower=float(np.clip(rho - hw, -1.0, 1.0)),
                upper=float(np.clip(rho + hw, -1.0, 1.0)),
            )
        )

    beta_pairs = [pq for p, q in upper_pairs for pq in ((p, q), (q, p))]
    beta_stats = []
    for (p, q), (beta, av) in spot_beta(estimate, vhat, beta_pairs).items():
        hw = z * np.sqrt(max(av, 0.0))
        beta_stats.append(
            PairStat(p=p, q=q, value=beta, avar=av, lower=beta - hw, upper=beta + hw)
        )

    return InferenceResult(
        estimate=estimate,
        vhat=vhat,
        level=level,
        sigma_lower=sigma_lower,
        sigma_upper=sigma_upper,
        correlations=tuple(corr_stats),
        betas=tuple(beta_stats),
    )
