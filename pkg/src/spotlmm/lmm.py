"""Local method of moments estimation of the spot covariance matrix.

Per block k and frequency j, the outer product of the spectral statistics
minus the noise-induced term is an unbiased moment for the local covariance
matrix.  Moments are combined across frequencies with weight matrices
proportional to the local Fisher information and averaged over a smoothing
window of blocks.  All d^2-vectorization is row-major; every devectorized
output is explicitly symmetrized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import BlockGrid, EstimatorConfig, Panel, window_bounds
from .errors import NumericalError
from .noise import BlockNoiseLevel, NoiseProfile, block_noise_levels, estimate_profile
from .spectral import LateReturns, SpectralStats, block_spectra, late_returns

PRE_DIAG_FLOOR = 1e-6  # spectrum floor of the regularized pre-estimate, x trace/d
_RIDGE = 1e-12


def vec(mat: np.ndarray) -> np.ndarray:
    """Row-major vectorization; for symmetric matrices this matches the
    (p-1)d+q indexing used throughout."""
    return np.asarray(mat).reshape(-1)


def devec(v: np.ndarray, d: int) -> np.ndarray:
    return np.asarray(v).reshape(d, d)


def _sym(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


@dataclass(frozen=True)
class SpotEstimate:
    """Spot covariance estimate at one evaluation time."""

    s: float
    sigma: np.ndarray  # (d, d), PSD-projected when requested
    window: tuple[int, int]  # (L, U) block indices
    psd_adjusted: bool
    vhat: np.ndarray | None = None  # (d^2, d^2) feasible variance matrix
    min_eig_raw: float = float("nan")  # smallest eigenvalue before projection

    @property
    def d(self) -> int:
        return self.sigma.shape[0]

    @property
    def window_len(self) -> int:
        return self.window[1] - self.window[0] + 1


@dataclass(frozen=True)
class WeightSet:
    """Frequency weight matrices W_j for one block; they sum to the identity."""

    weights: np.ndarray  # (J, d^2, d^2)
    block: int = -1

    @property
    def J(self) -> int:
        return self.weights.shape[0]


def bias_corrected_moment(
    stats: SpectralStats, noise: BlockNoiseLevel, j: int, h: float
) -> np.ndarray:
    """vec(S_jk S_jk' - pi^2 j^2 h^-2 diag(H_k)), the unbiased local moment."""
    s = stats.values[j - 1]
    mat = np.outer(s, s)
    c = (math.pi * j / h) ** 2
    mat = mat - c * np.diag(noise.diag)
    return vec(mat)


def pre_estimate(
    spectra: Sequence[SpectralStats],
    noise: Sequence[BlockNoiseLevel],
    window: tuple[int, int],
    j_pre: int,
    h: float,
) -> np.ndarray:
    """Equal-weight average of bias-corrected moments over the window and
    frequencies 1..j_pre; devectorized and symmetrized."""
    L, U = window
    if L > U:
        raise ValueError(f"empty window {window}")
    if j_pre < 1:
        raise ValueError("j_pre must be >= 1")
    d = spectra[L].values.shape[1]
    acc = np.zeros(d * d)
    for k in range(L, U + 1):
        for j in range(1, j_pre + 1):
            acc += bias_corrected_moment(spectra[k], noise[k], j, h)
    acc /= (U - L + 1) * j_pre
    return _sym(devec(acc, d))


def fisher_info(
    sigma: np.ndarray, noise_diag: np.ndarray, j: int, h: float
) -> np.ndarray:
    """Fisher information 0.5 * A^-1 (x) A^-1 with A = sigma + pi^2 j^2 h^-2 H."""
    c = (math.pi * j / h) ** 2
    a = sigma + c * np.diag(noise_diag)
    try:
        a_inv = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"singular moment covariance at frequency {j}; degenerate pre-estimate"
        ) from exc
    return 0.5 * np.kron(a_inv, a_inv)


def optimal_weights(
    sigma_pre: np.ndarray, noise_diag: np.ndarray, J: int, h: float
) -> WeightSet:
    """Weight matrices W_j = I_k^-1 I_jk from the per-frequency informations."""
    if J < 1:
        raise ValueError("J must be >= 1")
    d = sigma_pre.shape[0]
    infos = np.stack(
        [fisher_info(sigma_pre, noise_diag, j, h) for j in range(1, J + 1)]
    )
    total = infos.sum(axis=0)
    try:
        weights = np.linalg.solve(total[None, :, :], infos)
    except np.linalg.LinAlgError:
        ridge = _RIDGE * max(float(np.trace(total)) / (d * d), 1e-300)
        try:
            weights = np.linalg.solve(
                total[None, :, :] + ridge * np.eye(d * d)[None, :, :], infos
            )
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular aggregated Fisher information") from exc
    return WeightSet(weights=weights)


def _eig_floor(sigma: np.ndarray) -> tuple[np.ndarray, float]:
    w, v = np.linalg.eigh(_sym(sigma))
    min_eig = float(w[0])
    if min_eig >= 0.0:
        return _sym(sigma), min_eig
    w = np.maximum(w, 0.0)
    return _sym((v * w) @ v.T), min_eig


def psd_project(sigma: np.ndarray) -> np.ndarray:
    """Zero out negative eigenvalues: the Frobenius-nearest PSD matrix."""
    projected, _ = _eig_floor(sigma)
    return projected


def regularize_pre(sigma_pre: np.ndarray) -> np.ndarray:
    """PSD-project the pre-estimate and floor its spectrum at eps*trace/d.

    An eigenvalue floor (rather than a literal diagonal floor) is what makes
    the moment covariances invertible: a rank-deficient pilot with a large
    diagonal would otherwise stay singular.
    """
    return _regularize_stack(sigma_pre[None, :, :])[0]


def _regularize_stack(mats: np.ndarray) -> np.ndarray:
    """Batched pilot regularization for stacks of symmetric matrices."""
    sym = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    w, v = np.linalg.eigh(sym)
    w = np.maximum(w, 0.0)
    d = mats.shape[-1]
    floor = PRE_DIAG_FLOOR * w.sum(axis=-1, keepdims=True) / d
    w = np.maximum(w, floor)
    out = np.einsum("...ij,...j,...kj->...ik", v, w, v)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


# ---------------------------------------------------------------------------
# Packed per-day context


@dataclass(frozen=True)
class BlockData:
    """Precomputed per-day arrays the spot estimator iterates over."""

    grid: BlockGrid
    S: np.ndarray  # (B, J, d) spectral statistics
    H: np.ndarray  # (B, d) noise level diagonals
    M: np.ndarray  # (B, J, d, d) bias-corrected moments, devectorized
    late: LateReturns
    late_contrib: np.ndarray  # (m, J) additive S contributions of late returns

    @property
    def d(self) -> int:
        return self.S.shape[2]

    @property
    def J(self) -> int:
        return self.S.shape[1]


def _freq_scales(J: int, h: float) -> np.ndarray:
    j = np.arange(1, J + 1, dtype=float)
    return (math.pi * j / h) ** 2


def _moments(S: np.ndarray, H: np.ndarray, h: float) -> np.ndarray:
    """(B,J,d,d) moments S S' - c_j diag(H) from packed statistics."""
    B, J, d = S.shape
    M = np.einsum("kja,kjb->kjab", S, S)
    c = _freq_scales(J, h)
    di = np.arange(d)
    M[:, :, di, di] -= c[None, :, None] * H[:, None, :]
    return M


def pack_blocks(
    spectra: Sequence[SpectralStats],
    noise_levels: Sequence[BlockNoiseLevel],
    grid: BlockGrid,
    late: LateReturns | None = None,
) -> BlockData:
    if len(spectra) != grid.num_blocks or len(noise_levels) != grid.num_blocks:
        raise ValueError("spectra/noise levels inconsistent with the block grid")
    S = np.stack([st.values for st in spectra])
    H = np.stack([nl.diag for nl in noise_levels])
    if S.shape[0] != H.shape[0] or S.shape[2] != H.shape[1]:
        raise ValueError("spectra and noise levels have mismatched dimensions")
    if late is None:
        empty = np.empty(0)
        late = LateReturns(
            np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), empty, empty, empty
        )
    contrib = late.contributions(grid, S.shape[1]) if len(late) else np.empty((0, S.shape[1]))
    return BlockData(
        grid=grid,
        S=S,
        H=H,
        M=_moments(S, H, grid.h),
        late=late,
        late_contrib=contrib,
    )


def prepare(
    panel: Panel,
    config: EstimatorConfig,
    grid: BlockGrid,
    profile: NoiseProfile | None = None,
) -> BlockData:
    """Full per-day preparation: noise profile, spectra, noise levels, moments."""
    if profile is None:
        profile = estimate_profile(
            panel, config.noise_lag_max, config.significance_alpha
        )
    spectra = block_spectra(panel, grid)
    levels = block_noise_levels(panel, grid, profile)
    late = late_returns(panel, grid) if config.side == "one_sided" else None
    return pack_blocks(spectra, levels, grid, late)


def _causal_moments(
    bd: BlockData, L: int, U: int, cutoff: float
) -> np.ndarray:
    """Window moments with look-ahead returns removed (one-sided mode).

    A return whose interval midpoint falls in a window block but whose right
    endpoint exceeds the window end would use future data; its contribution
    is subtracted before the moments are formed.
    """
    Mw = bd.M[L : U + 1]
    if len(bd.late) == 0:
        return Mw
    sel = (bd.late.block >= L) & (bd.late.block <= U) & (bd.late.t_end > cutoff)
    if not np.any(sel):
        return Mw
    Mw = Mw.copy()
    blocks = np.unique(bd.late.block[sel])
    c = _freq_scales(bd.J, bd.grid.h)
    di = np.arange(bd.d)
    for k in blocks:
        rows = sel & (bd.late.block == k)
        s_adj = bd.S[k].copy()
        for idx in np.nonzero(rows)[0]:
            s_adj[:, bd.late.asset[idx]] -= bd.late_contrib[idx]
        m_k = np.einsum("ja,jb->jab", s_adj, s_adj)
        m_k[:, di, di] -= c[:, None] * bd.H[k][None, :]
        Mw[k - L] = m_k
    return Mw


def _batch_inv(a: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.inv(a)
    except np.linalg.LinAlgError:
        d = a.shape[-1]
        scale = float(np.abs(np.trace(a, axis1=-2, axis2=-1)).max()) / d
        ridge = _RIDGE * max(scale, 1e-300)
        try:
            return np.linalg.inv(a + ridge * np.eye(d))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular {what}") from exc


def estimate_at(
    bd: BlockData,
    config: EstimatorConfig,
    s: float,
    grid: BlockGrid | None = None,
) -> SpotEstimate:
    """Two-step spot estimate at time s with its feasible variance matrix.

    ``grid`` may override the packed one with a smaller spectral cutoff or a
    different window half-width on the same block partition (the Monte Carlo
    harness shares one packing across tuning rows).
    """
    if grid is None:
        grid = bd.grid
    elif grid.num_blocks != bd.grid.num_blocks or grid.J > bd.J:
        raise ValueError("override grid incompatible with packed block data")
    d = bd.d
    d2 = d * d
    J = grid.J
    L, U = window_bounds(grid, s, config.side)
    win = U - L + 1

    if config.side == "one_sided":
        Mw = _causal_moments(bd, L, U, cutoff=(U + 1) * grid.h)
    else:
        Mw = bd.M[L : U + 1]

    j_pre = min(config.j_pre, J)
    if config.pre_mode == "per_block":
        pre_reg_blocks = _regularize_stack(Mw[:, :j_pre].mean(axis=1))
    else:
        pre_reg_blocks = np.broadcast_to(
            regularize_pre(_sym(Mw[:, :j_pre].mean(axis=(0, 1)))), (win, d, d)
        )

    Hw = bd.H[L : U + 1]
    c = _freq_scales(J, grid.h)
    di = np.arange(d)
    Hd = np.zeros((win, d, d))
    Hd[:, di, di] = Hw

    if J == 1:
        # single frequency: the weight matrix is the identity by construction
        z = Mw[:, 0].reshape(win, d2)
        a = pre_reg_blocks + c[0] * Hd
        ik_inv = 2.0 * np.einsum("kac,kbe->kabce", a, a).reshape(win, d2, d2)
    else:
        A = pre_reg_blocks[:, None, :, :] + c[None, :, None, None] * Hd[:, None]
        B_inv = _batch_inv(A, "moment covariance (noise level zero and degenerate pre-estimate?)")
        y = 0.5 * np.einsum("kjab,kjbc,kjcd->kad", B_inv, Mw[:, :J], B_inv, optimize=True)
        info = 0.5 * np.einsum("kjac,kjbe->kabce", B_inv, B_inv, optimize=True).reshape(
            win, d2, d2
        )
        try:
            z = np.linalg.solve(info, y.reshape(win, d2, 1))[:, :, 0]
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular aggregated Fisher information") from exc
        ik_inv = _batch_inv(info, "aggregated Fisher information")

    sigma_raw = _sym(devec(z.mean(axis=0), d))
    vhat = ik_inv.mean(axis=0)
    vhat = 0.5 * (vhat + vhat.T)

    projected, min_eig = _eig_floor(sigma_raw)
    if config.psd_projection:
        sigma = projected
        adjusted = min_eig < 0.0
    else:
        sigma = sigma_raw
        adjusted = False
    return SpotEstimate(
        s=float(s),
        sigma=sigma,
        window=(L, U),
        psd_adjusted=bool(adjusted),
        vhat=vhat,
        min_eig_raw=min_eig,
    )


def spot_estimate(
    spectra: Sequence[SpectralStats],
    noise_levels: Sequence[BlockNoiseLevel],
    grid: BlockGrid,
    config: EstimatorConfig,
    s: float,
) -> SpotEstimate:
    """Spot estimate from per-block statistics (see ``estimate_at`` for the
    packed fast path used on whole-day evaluations)."""
    bd = pack_blocks(spectra, noise_levels, grid)
    return estimate_at(bd, config, s)


def spot_path(
    bd: BlockData,
    config: EstimatorConfig,
    points: Sequence[float] | None = None,
    grid: BlockGrid | None = None,
) -> list[SpotEstimate]:
    """Estimates at the given times (default: every block midpoint)."""
    g = bd.grid if grid is None else grid
    if points is None:
        points = g.midpoints()
    return [estimate_at(bd, config, float(s), grid=grid) for s in points]
