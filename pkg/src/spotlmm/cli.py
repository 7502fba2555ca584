"""Command-line front end: estimate, simulate, montecarlo, noise.

Exit codes: 0 success, 2 input/configuration error, 3 numerical failure.
Output files are deterministic for fixed inputs and seeds; partial outputs
are removed when a command fails.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import __version__, inference, normal
from .data import (
    BlockGrid,
    EstimatorConfig,
    Panel,
    _parse_timestamp,
    ingest_quotes_with_report,
    load_quote_csv,
    make_grid,
)
from .errors import ConfigError, DataError, NumericalError, SpotLmmError
from .harness import monte_carlo
from .lmm import estimate_at, prepare
from .noise import AssetNoise, NoiseProfile, estimate_profile
from .sim import default_sim_config, simulate
from .spectral import block_spectra, write_spectra_csv

DAY_NS = 23_400_000_000_000  # 6.5 trading hours in nanoseconds


def _fmt(x: float) -> str:
    return repr(float(x))


class _Outputs:
    """Tracks written files so failures leave no partial outputs behind."""

    def __init__(self):
        self.paths: list[str] = []

    def open(self, path: str, mode: str = "w"):
        self.paths.append(path)
        return open(path, mode, newline="")

    def cleanup(self):
        for p in self.paths:
            try:
                os.remove(p)
            except OSError:
                pass


def _resolve_threads(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("SPOTLMM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"SPOTLMM_THREADS={env!r} is not an integer")
    return os.cpu_count() or 1


def _day_window(args, records) -> tuple[float, float]:
    times = [r[1] for r in records]
    if not times:
        raise DataError("input contains no records")
    open_t = _parse_timestamp(args.open) if args.open is not None else min(times)
    close_t = _parse_timestamp(args.close) if args.close is not None else max(times)
    return open_t, close_t


def _parse_pairs(spec: str | None, panel: Panel) -> list[tuple[int, int]] | None:
    if spec is None:
        return None
    tokens = [t.strip() for t in spec.split(",") if t.strip()]
    if len(tokens) % 2 != 0:
        raise ConfigError(f"--pairs needs an even number of entries, got {len(tokens)}")
    ids = list(panel.asset_ids)

    def resolve(tok: str) -> int:
        if tok in ids:
            return ids.index(tok)
        try:
            idx = int(tok)
        except ValueError:
            raise ConfigError(f"unknown asset {tok!r} in --pairs")
        if not (1 <= idx <= len(ids)):
            raise ConfigError(f"--pairs index {idx} outside 1..{len(ids)}")
        return idx - 1

    out = []
    for a, b in zip(tokens[::2], tokens[1::2]):
        p, q = resolve(a), resolve(b)
        if p == q:
            raise ConfigError(f"--pairs entry ({a},{b}) names the same asset twice")
        out.append((p, q))
    return out


def _config_from_args(args) -> EstimatorConfig:
    return EstimatorConfig(
        theta_h=args.theta_h,
        theta_j=args.theta_j,
        theta_k=args.theta_k,
        delta=args.delta,
        j_pre=args.j_pre,
        side="one_sided" if args.side == "one" else "two_sided",
        psd_projection=args.psd == "on",
        noise_lag_max=args.r_max,
        significance_alpha=args.alpha,
    )


def _profile_to_json(profile: NoiseProfile) -> list[dict]:
    return [
        {
            "asset_id": a.asset_id,
            "lag_order": a.lag_order,
            "autocovariances": [float(x) for x in a.autocovariances],
            "long_run": float(a.long_run),
            "floored": bool(a.floored),
        }
        for a in profile.assets
    ]


def _profile_from_json(payload: list[dict]) -> NoiseProfile:
    return NoiseProfile(
        tuple(
            AssetNoise(
                asset_id=e["asset_id"],
                lag_order=int(e["lag_order"]),
                autocovariances=np.array(e["autocovariances"], dtype=float),
                long_run=float(e["long_run"]),
                floored=bool(e.get("floored", False)),
            )
            for e in payload
        )
    )


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cmd_estimate(args) -> int:
    records = load_quote_csv(args.input)
    man = None
    if args.manifest:
        with open(args.manifest) as fh:
            man = json.load(fh)
    if man is not None and args.open is None and args.close is None:
        # keep the original time mapping when re-running from a manifest
        day_window = (float(man["timestamps"]["open"]), float(man["timestamps"]["close"]))
    else:
        day_window = _day_window(args, records)
    panel, report = ingest_quotes_with_report(records, day_window)
    pairs = _parse_pairs(args.pairs, panel)

    if man is not None:
        config = EstimatorConfig(**man["config"])
        grid = BlockGrid(**man["grid"])
        profile = _profile_from_json(man["noise"])
        level = float(man["level"])
        if [a.asset_id for a in profile.assets] != list(panel.asset_ids):
            raise DataError("manifest noise profile does not match the input's assets")
        if man["eval_points"] == "block_midpoints":
            points = grid.midpoints().tolist()
        else:
            points = [float(s) for s in man["eval_points"]]
        if pairs is None and man.get("pairs") not in (None, "all"):
            pairs = [tuple(pq) for pq in man["pairs"]]
    else:
        config = _config_from_args(args)
        grid = make_grid(config, panel)
        profile = estimate_profile(
            panel,
            config.noise_lag_max,
            config.significance_alpha,
            signal_correction=args.signal_correction,
        )
        level = args.level
        points = [float(s) for s in args.at.split(",")] if args.at else None

    bd = prepare(panel, config, grid, profile=profile)
    eval_points = grid.midpoints().tolist() if points is None else points
    estimates = [estimate_at(bd, config, s) for s in eval_points]
    results = [
        inference.confidence_bands(e, e.vhat, level, pairs=pairs) for e in estimates
    ]

    if args.dump_spectra:
        write_spectra_csv(args.dump_spectra, block_spectra(panel, grid), panel.asset_ids)

    d = panel.d
    out_prefix = args.out or os.path.splitext(args.input)[0] + "_spot"
    outputs = _Outputs()
    try:
        csv_path = out_prefix + "_results.csv"
        json_path = out_prefix + "_results.json"
        man_path = out_prefix + "_manifest.json"
        _write_results_csv(outputs, csv_path, results, d, pairs)
        payload = _results_json(panel, results, report, level)
        if args.integrated:
            mids_est = (
                estimates
                if points is None
                else [estimate_at(bd, config, s) for s in grid.midpoints()]
            )
            integrated = np.mean([e.sigma for e in mids_est], axis=0)
            payload["integrated_covariance"] = integrated.tolist()
        with outputs.open(json_path) as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")
        manifest = {
            "tool": "spotlmm",
            "version": __version__,
            "command": "estimate",
            "input_path": os.path.abspath(args.input),
            "input_sha256": _sha256(args.input),
            "timestamps": {"open": day_window[0], "close": day_window[1]},
            "config": {
                "theta_h": config.theta_h,
                "theta_j": config.theta_j,
                "theta_k": config.theta_k,
                "delta": config.delta,
                "j_pre": config.j_pre,
                "side": config.side,
                "psd_projection": config.psd_projection,
                "noise_lag_max": config.noise_lag_max,
                "significance_alpha": config.significance_alpha,
            },
            "grid": {"h": grid.h, "num_blocks": grid.num_blocks, "J": grid.J, "K": grid.K},
            "noise": _profile_to_json(profile),
            "level": level,
            "eval_points": "block_midpoints" if points is None else eval_points,
            "pairs": "all" if pairs is None else [list(pq) for pq in pairs],
            "threads": _resolve_threads(args.threads),
        }
        with outputs.open(man_path) as fh:
            json.dump(manifest, fh, indent=1)
            fh.write("\n")
    except Exception:
        outputs.cleanup()
        raise
    print(f"wrote {csv_path}, {json_path}, {man_path}")
    print(
        f"ingest: {sum(report.retained.values())} revisions kept; "
        f"{report.crossed_skipped} crossed, {report.outside_window} outside window, "
        f"{report.duplicate_mids_dropped} duplicate mids dropped"
    )
    return 0


def _pair_columns(d: int, pairs) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    if pairs is None:
        upper = [(p, q) for p in range(d) for q in range(p + 1, d)]
    else:
        upper = sorted({(min(p, q), max(p, q)) for p, q in pairs})
    ordered = [pq for p, q in upper for pq in ((p, q), (q, p))]
    return upper, ordered


def _write_results_csv(outputs: _Outputs, path: str, results, d: int, pairs) -> None:
    upper, ordered = _pair_columns(d, pairs)
    cols = ["s", "window_l", "window_u", "psd_adjusted"]
    for p in range(d):
        for q in range(p, d):
            cols += [f"cov_{p + 1}_{q + 1}", f"cov_{p + 1}_{q + 1}_half"]
    for p, q in upper:
        cols += [f"corr_{p + 1}_{q + 1}", f"corr_{p + 1}_{q + 1}_half"]
    for p, q in ordered:
        cols += [f"beta_{p + 1}_{q + 1}", f"beta_{p + 1}_{q + 1}_half"]
    with outputs.open(path) as fh:
        fh.write(",".join(cols) + "\n")
        for res in results:
            est = res.estimate
            z_half = est.sigma - res.sigma_lower
            row = [
                _fmt(est.s),
                str(est.window[0]),
                str(est.window[1]),
                str(int(est.psd_adjusted)),
            ]
            for p in range(d):
                for q in range(p, d):
                    row += [_fmt(est.sigma[p, q]), _fmt(z_half[p, q])]
            corr = {(c.p, c.q): c for c in res.correlations}
            for p, q in upper:
                c = corr[(p, q)]
                row += [_fmt(c.value), _fmt(0.5 * (c.upper - c.lower))]
            beta = {(b.p, b.q): b for b in res.betas}
            for p, q in ordered:
                b = beta[(p, q)]
                row += [_fmt(b.value), _fmt(0.5 * (b.upper - b.lower))]
            fh.write(",".join(row) + "\n")


def _results_json(panel: Panel, results, report, level: float) -> dict:
    rows = []
    for res in results:
        est = res.estimate
        rows.append(
            {
                "s": est.s,
                "window": [est.window[0], est.window[1]],
                "psd_adjusted": est.psd_adjusted,
                "sigma": est.sigma.tolist(),
                "sigma_lower": res.sigma_lower.tolist(),
                "sigma_upper": res.sigma_upper.tolist(),
                "correlations": [
                    {
                        "p": c.p + 1,
                        "q": c.q + 1,
                        "value": c.value,
                        "lower": c.lower,
                        "upper": c.upper,
                    }
                    for c in res.correlations
                ],
                "betas": [
                    {
                        "p": b.p + 1,
                        "q": b.q + 1,
                        "value": b.value,
                        "lower": b.lower,
                        "upper": b.upper,
                    }
                    for b in res.betas
                ],
            }
        )
    return {
        "assets": list(panel.asset_ids),
        "level": level,
        "results": rows,
        "ingest": {
            "retained": report.retained,
            "crossed_skipped": report.crossed_skipped,
            "outside_window": report.outside_window,
            "duplicate_mids_dropped": report.duplicate_mids_dropped,
            "nonmonotonic_dropped": report.nonmonotonic_dropped,
        },
    }


def cmd_simulate(args) -> int:
    cfg = default_sim_config(args.d, args.n_target, args.seed)
    sim = simulate(cfg)
    out_prefix = args.out
    outputs = _Outputs()
    try:
        quotes_path = out_prefix + "_quotes.csv"
        truth_path = out_prefix + "_truth.csv"
        info_path = out_prefix + "_sim.json"
        with outputs.open(quotes_path) as fh:
            fh.write("asset_id,timestamp,price\n")
            rows = []
            for s in sim.panel.series:
                ns = np.round(s.times * DAY_NS).astype(np.int64)
                keep = np.concatenate([[True], np.diff(ns) > 0])
                for t, lp in zip(ns[keep], s.log_prices[keep]):
                    rows.append((int(t), s.asset_id, math.exp(lp)))
            rows.sort()
            for t, asset, px in rows:
                fh.write(f"{asset},{t},{_fmt(px)}\n")
        d = sim.config.d
        with outputs.open(truth_path) as fh:
            head = ["time"] + [f"sigma_{p + 1}_{q + 1}" for p in range(d) for q in range(d)]
            fh.write(",".join(head) + "\n")
            for t, mat in zip(sim.truth_times, sim.truth):
                fh.write(",".join([_fmt(t)] + [_fmt(x) for x in mat.reshape(-1)]) + "\n")
        with outputs.open(info_path) as fh:
            json.dump(
                {
                    "tool": "spotlmm",
                    "version": __version__,
                    "command": "simulate",
                    "d": args.d,
                    "n_target": args.n_target,
                    "seed": args.seed,
                    "timestamps": {"open": 0, "close": DAY_NS},
                    "noise_long_run": [float(x) for x in sim.noise_truth],
                    "noise_ma_coeff": list(sim.config.noise_ma_coeff),
                    "loadings": list(sim.config.loadings),
                    "poisson_intensity": list(sim.config.poisson_intensity),
                    "vol_floor_events": sim.vol_floor_events,
                },
                fh,
                indent=1,
            )
            fh.write("\n")
    except Exception:
        outputs.cleanup()
        raise
    print(f"wrote {quotes_path}, {truth_path}, {info_path}")
    return 0


def cmd_montecarlo(args) -> int:
    grid_rows = []
    with open(args.grid) as fh:
        header = fh.readline().strip().lower().split(",")
        if header[:3] != ["theta_h", "theta_j", "theta_k"]:
            raise DataError(f"{args.grid}: expected header theta_h,theta_j,theta_k")
        for line in fh:
            if not line.strip():
                continue
            a, b, c = line.strip().split(",")[:3]
            grid_rows.append((float(a), float(b), float(c)))
    if not grid_rows:
        raise DataError(f"{args.grid}: no tuning rows")
    est_cfgs = [
        EstimatorConfig(theta_h=a, theta_j=b, theta_k=c, delta=args.delta)
        for a, b, c in grid_rows
    ]
    sim_cfg = default_sim_config(args.d, args.n_target, args.seed)
    report = monte_carlo(
        sim_cfg, est_cfgs, args.reps, workers=_resolve_threads(args.threads)
    )
    outputs = _Outputs()
    try:
        with outputs.open(args.out + "_table.csv") as fh:
            fh.write(report.to_csv())
        with outputs.open(args.out + "_table.txt") as fh:
            fh.write(report.to_text())
    except Exception:
        outputs.cleanup()
        raise
    print(report.to_text())
    print(f"wrote {args.out}_table.csv, {args.out}_table.txt")
    return 0


def cmd_noise(args) -> int:
    records = load_quote_csv(args.input)
    day_window = _day_window(args, records)
    panel, _ = ingest_quotes_with_report(records, day_window)
    profile = estimate_profile(
        panel, args.r_max, args.alpha, signal_correction=args.signal_correction
    )
    if args.format == "json":
        print(json.dumps(_profile_to_json(profile), indent=1))
    else:
        print("asset_id,lag_order,long_run,lag,autocovariance")
        for a in profile.assets:
            for u, eta in enumerate(a.autocovariances):
                print(f"{a.asset_id},{a.lag_order},{_fmt(a.long_run)},{u},{_fmt(eta)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="spotlmm",
        description="Spot covariance, correlation and beta estimation from noisy tick data",
    )
    ap.add_argument("--version", action="version", version=f"spotlmm {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate spot covariances from a quote CSV")
    est.add_argument("--input", required=True, help="CSV of quotes or prices")
    est.add_argument("--open", default=None, help="day open timestamp (ns or ISO-8601)")
    est.add_argument("--close", default=None, help="day close timestamp (ns or ISO-8601)")
    est.add_argument("--theta-h", type=float, default=0.175, dest="theta_h")
    est.add_argument("--theta-j", type=float, default=7.0, dest="theta_j")
    est.add_argument("--theta-k", type=float, default=2.0, dest="theta_k")
    est.add_argument("--j-pre", type=int, default=5, dest="j_pre")
    est.add_argument("--delta", type=float, default=0.01)
    est.add_argument("--side", choices=("two", "one"), default="two")
    est.add_argument("--level", type=float, default=0.95)
    est.add_argument("--psd", choices=("on", "off"), default="on")
    est.add_argument("--pairs", default=None, help="comma list of asset pairs (ids or 1-based indices)")
    est.add_argument("--at", default=None, help="comma list of evaluation times in [0,1]")
    est.add_argument("--r-max", type=int, default=15, dest="r_max")
    est.add_argument("--alpha", type=float, default=0.05)
    est.add_argument("--signal-correction", action="store_true")
    est.add_argument("--integrated", action="store_true", help="also write the day-average matrix")
    est.add_argument("--dump-spectra", default=None)
    est.add_argument("--manifest", default=None, help="re-run from a previous run manifest")
    est.add_argument("--out", default=None, help="output path prefix")
    est.add_argument("--threads", type=int, default=None)
    est.set_defaults(func=cmd_estimate)

    simp = sub.add_parser("simulate", help="write a synthetic day with ground truth")
    simp.add_argument("--d", type=int, default=2)
    simp.add_argument("--n-target", type=int, default=20000, dest="n_target")
    simp.add_argument("--seed", type=int, default=1)
    simp.add_argument("--out", required=True, help="output path prefix")
    simp.set_defaults(func=cmd_simulate)

    mc = sub.add_parser("montecarlo", help="tuning-grid Monte Carlo performance table")
    mc.add_argument("--grid", required=True, help="CSV with header theta_h,theta_j,theta_k")
    mc.add_argument("--d", type=int, default=5)
    mc.add_argument("--n-target", type=int, default=20000, dest="n_target")
    mc.add_argument("--reps", type=int, default=300)
    mc.add_argument("--seed", type=int, default=1)
    mc.add_argument("--delta", type=float, default=0.01)
    mc.add_argument("--out", required=True, help="output path prefix")
    mc.add_argument("--threads", type=int, default=None)
    mc.set_defaults(func=cmd_montecarlo)

    noi = sub.add_parser("noise", help="per-asset noise lag order and variances")
    noi.add_argument("--input", required=True)
    noi.add_argument("--open", default=None)
    noi.add_argument("--close", default=None)
    noi.add_argument("--r-max", type=int, default=15, dest="r_max")
    noi.add_argument("--alpha", type=float, default=0.05)
    noi.add_argument("--signal-correction", action="store_true")
    noi.add_argument("--format", choices=("csv", "json"), default="csv")
    noi.set_defaults(func=cmd_noise)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except SpotLmmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
