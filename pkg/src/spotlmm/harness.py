"""Accuracy metrics and the Monte Carlo experiment driver.

Metrics follow the normalized entrywise-ratio convention: squared relative
deviations of estimated covariance entries from their true paths, averaged
over time, entries and replications.  The decomposition

    d^2 * MIFB = 2 * (d(d-1)/2) * MISE_c + d * MISE_v

holds exactly because all three metrics share cell exclusions and fixed
normalizers.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import BlockGrid, EstimatorConfig, Panel, make_grid
from .errors import ConfigError
from .lmm import BlockData, estimate_at, prepare
from .noise import estimate_profile
from .sim import SimConfig, SimOutput, simulate

PSD_REL_TOL = 1e-10
DEFAULT_MIN_TRUTH = 1e-14


@dataclass(frozen=True)
class RatioMetric:
    value: float
    root: float
    excluded_cells: int


def _as_rep_list(paths) -> list[np.ndarray]:
    if isinstance(paths, np.ndarray) and paths.ndim == 3:
        return [paths]
    return [np.asarray(p) for p in paths]


def _cell_sums(
    est: np.ndarray, truth: np.ndarray, min_truth: float
) -> tuple[float, float, int, int]:
    """Time-averaged squared ratio deviations: (diag sum, unordered off-diag
    sum, excluded diag cells, excluded off-diag cells)."""
    if est.shape != truth.shape:
        raise ValueError(f"estimate/truth shapes differ: {est.shape} vs {truth.shape}")
    T, d, _ = truth.shape
    ok = np.abs(truth) >= min_truth
    dev = np.zeros_like(truth)
    np.divide(est, truth, out=dev, where=ok)
    dev = np.where(ok, (dev - 1.0) ** 2, 0.0)
    di = np.arange(d)
    diag_mask = np.zeros((d, d), dtype=bool)
    diag_mask[di, di] = True
    upper_mask = np.triu(np.ones((d, d), dtype=bool), k=1)
    sum_diag = float(dev[:, diag_mask].sum()) / T
    sum_off = float(dev[:, upper_mask].sum()) / T
    excl_diag = int((~ok)[:, diag_mask].sum())
    excl_off = int((~ok)[:, upper_mask].sum())
    return sum_diag, sum_off, excl_diag, excl_off


def mifb(estimates, truths, min_truth: float = DEFAULT_MIN_TRUTH) -> RatioMetric:
    """Mean integrated squared relative Frobenius deviation over all entries."""
    est_list, truth_list = _as_rep_list(estimates), _as_rep_list(truths)
    if len(est_list) != len(truth_list):
        raise ValueError("need one truth path per estimate path")
    M = len(est_list)
    d = truth_list[0].shape[1]
    total, excluded = 0.0, 0
    for e, t in zip(est_list, truth_list):
        sd, so, xd, xo = _cell_sums(e, t, min_truth)
        total += sd + 2.0 * so
        excluded += xd + 2 * xo
    value = total / (M * d * d)
    return RatioMetric(value=value, root=math.sqrt(value), excluded_cells=excluded)


def mise_c(estimates, truths, min_truth: float = DEFAULT_MIN_TRUTH) -> RatioMetric:
    """Off-diagonal (covariance) part, one term per unordered pair."""
    est_list, truth_list = _as_rep_list(estimates), _as_rep_list(truths)
    if len(est_list) != len(truth_list):
        raise ValueError("need one truth path per estimate path")
    M = len(est_list)
    d = truth_list[0].shape[1]
    if d < 2:
        raise ConfigError("covariance metric undefined for d=1 (no off-diagonal entries)")
    total, excluded = 0.0, 0
    for e, t in zip(est_list, truth_list):
        _, so, _, xo = _cell_sums(e, t, min_truth)
        total += so
        excluded += xo
    value = total / (M * d * (d - 1) / 2.0)
    return RatioMetric(value=value, root=math.sqrt(value), excluded_cells=excluded)


def mise_v(estimates, truths, min_truth: float = DEFAULT_MIN_TRUTH) -> RatioMetric:
    """Diagonal (variance) part."""
    est_list, truth_list = _as_rep_list(estimates), _as_rep_list(truths)
    if len(est_list) != len(truth_list):
        raise ValueError("need one truth path per estimate path")
    M = len(est_list)
    d = truth_list[0].shape[1]
    total, excluded = 0.0, 0
    for e, t in zip(est_list, truth_list):
        sd, _, xd, _ = _cell_sums(e, t, min_truth)
        total += sd
        excluded += xd
    value = total / (M * d)
    return RatioMetric(value=value, root=math.sqrt(value), excluded_cells=excluded)


def psd_ok(min_eig_raw: float, sigma: np.ndarray) -> bool:
    scale = max(float(np.abs(np.diag(sigma)).max()), 1e-300)
    return min_eig_raw >= -PSD_REL_TOL * scale


# ---------------------------------------------------------------------------
# Monte Carlo driver


@dataclass(frozen=True)
class MCRow:
    theta_h: float
    theta_j: float
    theta_k: float
    rmifb_pct: float
    rmise_c_pct: float
    rmise_v_pct: float
    psd_pct: float
    excluded_cells: int


@dataclass(frozen=True)
class MCReport:
    rows: tuple[MCRow, ...]
    reps: int
    seed: int
    d: int
    n_target: int

    def to_csv(self) -> str:
        lines = ["theta_h,theta_j,theta_k,rmifb_pct,rmise_c_pct,rmise_v_pct,psd_pct,excluded_cells"]
        for r in self.rows:
            lines.append(
                f"{r.theta_h:g},{r.theta_j:g},{r.theta_k:g},"
                f"{r.rmifb_pct:.3f},{r.rmise_c_pct:.3f},{r.rmise_v_pct:.3f},"
                f"{r.psd_pct:.3f},{r.excluded_cells}"
            )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = (
            f"Monte Carlo performance (d={self.d}, n_target={self.n_target}, "
            f"M={self.reps}, seed={self.seed})\n"
        )
        cols = f"{'theta_h':>8} {'theta_J':>8} {'theta_K':>8} {'RMIFB%':>9} {'RMISEc%':>9} {'RMISEv%':>9} {'%PSD':>8}\n"
        sep = "-" * len(cols) + "\n"
        body = ""
        for r in self.rows:
            body += (
                f"{r.theta_h:8.3f} {r.theta_j:8.3f} {r.theta_k:8.3f} "
                f"{r.rmifb_pct:9.3f} {r.rmise_c_pct:9.3f} {r.rmise_v_pct:9.3f} {r.psd_pct:8.1f}\n"
            )
        return head + sep + cols + sep + body + sep


@dataclass
class _RepResult:
    rep: int
    # per estimator row: (sum_diag, sum_off, excl_diag, excl_off, psd_all)
    rows: list[tuple[float, float, int, int, bool]]


def _grid_groups(
    est_configs: Sequence[EstimatorConfig], panel: Panel
) -> dict[tuple[float, float], tuple[BlockGrid, list[int]]]:
    """Group estimator rows sharing a block partition; the packed statistics
    carry the largest spectral cutoff needed within each group."""
    groups: dict[tuple[float, float], tuple[BlockGrid, list[int]]] = {}
    for i, cfg in enumerate(est_configs):
        grid = make_grid(cfg, panel)
        key = (cfg.theta_h, cfg.delta)
        if key not in groups:
            groups[key] = (grid, [i])
        else:
            base, members = groups[key]
            if grid.J > base.J:
                base = BlockGrid(h=base.h, num_blocks=base.num_blocks, J=grid.J, K=base.K)
            groups[key] = (base, members + [i])
    return groups


def estimate_on_truth_grid(
    bd: BlockData,
    grid: BlockGrid,
    est_cfg: EstimatorConfig,
    truth_times: np.ndarray,
) -> tuple[np.ndarray, bool]:
    """Block-midpoint spot path mapped onto the truth grid, plus whether all
    block estimates were PSD before projection."""
    path = [estimate_at(bd, est_cfg, float(s), grid=grid) for s in grid.midpoints()]
    all_psd = all(psd_ok(e.min_eig_raw, e.sigma) for e in path)
    mats = np.stack([e.sigma for e in path])
    return mats[grid.blocks_of(truth_times)], all_psd


def _run_rep(
    rep: int,
    sim_cfg: SimConfig,
    est_configs: Sequence[EstimatorConfig],
    child: np.random.SeedSequence,
    min_truth: float,
    estimator_fn: Callable[[SimOutput, EstimatorConfig], tuple[np.ndarray, bool]] | None,
) -> _RepResult:
    sim = simulate(sim_cfg, rng=np.random.default_rng(child))
    rows: list[tuple[float, float, int, int, bool]] = []
    if estimator_fn is not None:
        for cfg in est_configs:
            est, all_psd = estimator_fn(sim, cfg)
            sd, so, xd, xo = _cell_sums(est, sim.truth, min_truth)
            rows.append((sd, so, xd, xo, all_psd))
        return _RepResult(rep=rep, rows=rows)

    panel = sim.panel
    profile = estimate_profile(
        panel, est_configs[0].noise_lag_max, est_configs[0].significance_alpha
    )
    groups = _grid_groups(est_configs, panel)
    packed: dict[tuple[float, float], BlockData] = {
        key: prepare(panel, est_configs[members[0]], grid, profile=profile)
        for key, (grid, members) in groups.items()
    }
    results: dict[int, tuple[float, float, int, int, bool]] = {}
    for key, (base_grid, members) in groups.items():
        bd = packed[key]
        for i in members:
            cfg = est_configs[i]
            row_grid = make_grid(cfg, panel)
            est, all_psd = estimate_on_truth_grid(bd, row_grid, cfg, sim.truth_times)
            sd, so, xd, xo = _cell_sums(est, sim.truth, min_truth)
            results[i] = (sd, so, xd, xo, all_psd)
    return _RepResult(rep=rep, rows=[results[i] for i in range(len(est_configs))])


def monte_carlo(
    sim_cfg: SimConfig,
    est_configs: Sequence[EstimatorConfig],
    reps: int,
    *,
    min_truth: float = DEFAULT_MIN_TRUTH,
    workers: int | None = None,
    estimator_fn: Callable[[SimOutput, EstimatorConfig], tuple[np.ndarray, bool]] | None = None,
) -> MCReport:
    """Replicate the simulate/estimate cycle over a grid of tuning rows.

    Each replication draws from its own stream spawned off the master seed
    (``SeedSequence(seed).spawn(reps)[m]``), so results do not depend on the
    number of workers.  ``estimator_fn`` may replace the estimation pipeline
    (instrumentation and oracle checks); it forces serial execution.
    """
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    if not est_configs:
        raise ConfigError("need at least one estimator configuration")
    children = np.random.SeedSequence(sim_cfg.seed).spawn(reps)
    if workers is None:
        workers = os.cpu_count() or 1
    workers = max(1, min(workers, reps))

    rep_results: list[_RepResult]
    if workers == 1 or estimator_fn is not None:
        rep_results = [
            _run_rep(m, sim_cfg, est_configs, children[m], min_truth, estimator_fn)
            for m in range(reps)
        ]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_rep, m, sim_cfg, est_configs, children[m], min_truth, None)
                for m in range(reps)
            ]
            rep_results = [f.result() for f in futures]
    rep_results.sort(key=lambda r: r.rep)

    d = sim_cfg.d
    rows = []
    for i, cfg in enumerate(est_configs):
        sum_all = 0.0
        sum_off = 0.0
        sum_diag = 0.0
        excl = 0
        psd_count = 0
        for rr in rep_results:
            sd, so, xd, xo, ok = rr.rows[i]
            sum_diag += sd
            sum_off += so
            sum_all += sd + 2.0 * so
            excl += xd + 2 * xo
            psd_count += int(ok)
        mifb_val = sum_all / (reps * d * d)
        mise_v_val = sum_diag / (reps * d)
        mise_c_val = sum_off / (reps * d * (d - 1) / 2.0) if d > 1 else float("nan")
        rows.append(
            MCRow(
                theta_h=cfg.theta_h,
                theta_j=cfg.theta_j,
                theta_k=cfg.theta_k,
                rmifb_pct=100.0 * math.sqrt(mifb_val),
                rmise_c_pct=100.0 * math.sqrt(mise_c_val) if d > 1 else float("nan"),
                rmise_v_pct=100.0 * math.sqrt(mise_v_val),
                psd_pct=100.0 * psd_count / reps,
                excluded_cells=excl,
            )
        )
    return MCReport(
        rows=tuple(rows),
        reps=reps,
        seed=sim_cfg.seed,
        d=d,
        n_target=sim_cfg.n_target,
    )
