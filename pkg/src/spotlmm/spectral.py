"""Sine-basis functions and per-block spectral statistics.

Each block [kh, (k+1)h) carries an orthogonal sine system; weighting the
observed returns with these functions de-correlates them so that every
(block, frequency) pair contributes one d-vector of statistics whose
empirical covariance identifies the local covariance matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import BlockGrid, ObservationSeries, Panel


@dataclass(frozen=True)
class SpectralStats:
    """Spectral statistics of one block: values[j-1, p-1] is frequency j, asset p."""

    block: int
    values: np.ndarray  # (J, d)
    contributing: np.ndarray  # (d,) count of returns that entered per asset

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite spectral statistics in block {self.block}")


def phi(j: int, k: int, h: float, t: float) -> float:
    """Sine basis function of frequency j on block k, zero off the block."""
    u = t - k * h
    if u < 0.0 or u >= h:
        return 0.0
    return math.sqrt(2.0 * h) / (j * math.pi) * math.sin(j * math.pi * u / h)


def spectral_statistic(series: ObservationSeries, j: int, k: int, h: float) -> float:
    """Weighted return sum pi*j/h * sum_i dY_i * phi_jk((t_{i-1}+t_i)/2).

    Returns are assigned to the block containing their interval midpoint;
    a block without contributing returns yields 0.
    """
    mids = series.return_midpoints
    dy = series.returns
    u = mids - k * h
    mask = (u >= 0.0) & (u < h)
    if not np.any(mask):
        return 0.0
    vals = np.sin(j * math.pi * u[mask] / h)
    # pi*j/h * sqrt(2h)/(j*pi) = sqrt(2/h)
    return math.sqrt(2.0 / h) * float(np.sum(dy[mask] * vals))


def block_spectra(panel: Panel, grid: BlockGrid, J: int | None = None) -> list[SpectralStats]:
    """Evaluate all spectral statistics for frequencies 1..J on every block."""
    J = grid.J if J is None else J
    d = panel.d
    B = grid.num_blocks
    S = np.zeros((B, J, d))
    counts = np.zeros((B, d), dtype=np.int64)
    j_pi = np.pi * np.arange(1, J + 1)
    scale = math.sqrt(2.0 / grid.h)

    for p, series in enumerate(panel.series):
        mids = series.return_midpoints
        dy = series.returns
        blocks = grid.blocks_of(mids)
        cnt = np.bincount(blocks, minlength=B)
        counts[:, p] = cnt
        phase = mids / grid.h - blocks  # in [0, 1)
        # (n_returns, J) weighted sine table, then contiguous per-block sums
        contrib = dy[:, None] * np.sin(phase[:, None] * j_pi[None, :])
        starts = np.minimum(np.searchsorted(blocks, np.arange(B)), len(mids) - 1)
        sums = np.add.reduceat(contrib, starts, axis=0)
        sums[cnt == 0] = 0.0  # reduceat yields a stray element on empty segments
        S[:, :, p] = scale * sums

    return [
        SpectralStats(block=k, values=S[k], contributing=counts[k]) for k in range(B)
    ]


@dataclass(frozen=True)
class LateReturns:
    """Returns whose right endpoint lies beyond the end of their assigned block.

    Used by the one-sided (causal) estimator: a return with midpoint inside
    the evaluation window but an endpoint past the window end would leak
    future data and is removed there.
    """

    block: np.ndarray  # (m,) int
    asset: np.ndarray  # (m,) int
    mid: np.ndarray  # (m,)
    dy: np.ndarray  # (m,)
    t_end: np.ndarray  # (m,)

    def __len__(self) -> int:
        return len(self.block)

    def contributions(self, grid: BlockGrid, J: int) -> np.ndarray:
        """Per late return, its (J,) additive contribution to S[block, :, asset]."""
        j_pi = np.pi * np.arange(1, J + 1)
        phase = self.mid / grid.h - self.block
        return math.sqrt(2.0 / grid.h) * self.dy[:, None] * np.sin(
            phase[:, None] * j_pi[None, :]
        )


def late_returns(panel: Panel, grid: BlockGrid) -> LateReturns:
    blocks_l, assets_l, mids_l, dys_l, ends_l = [], [], [], [], []
    for p, series in enumerate(panel.series):
        mids = series.return_midpoints
        dy = series.returns
        t_end = series.times[1:]
        blocks = grid.blocks_of(mids)
        late = t_end > (blocks + 1) * grid.h
        if np.any(late):
            blocks_l.append(blocks[late])
            assets_l.append(np.full(int(late.sum()), p, dtype=np.int64))
            mids_l.append(mids[late])
            dys_l.append(dy[late])
            ends_l.append(t_end[late])
    if not blocks_l:
        empty = np.empty(0)
        return LateReturns(
            np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), empty, empty, empty
        )
    return LateReturns(
        np.concatenate(blocks_l),
        np.concatenate(assets_l),
        np.concatenate(mids_l),
        np.concatenate(dys_l),
        np.concatenate(ends_l),
    )


def write_spectra_csv(path: str, stats: list[SpectralStats], asset_ids) -> None:
    """Debug dump: one row per (block, frequency, asset)."""
    with open(path, "w") as fh:
        fh.write("block,j,asset_id,value\n")
        for st in stats:
            J, d = st.values.shape
            for j in range(J):
                for p in range(d):
                    fh.write(f"{st.block},{j + 1},{asset_ids[p]},{st.values[j, p]!r}\n")
