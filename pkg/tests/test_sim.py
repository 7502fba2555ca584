import math
from dataclasses import replace

import numpy as np
import pytest

from spotlmm.data import EstimatorConfig
from spotlmm.errors import ConfigError
from spotlmm.harness import (
    estimate_on_truth_grid,
    mifb,
    mise_c,
    mise_v,
    monte_carlo,
)
from spotlmm.sim import (
    constant_sigma_config,
    default_sim_config,
    seasonal_fn,
    simulate,
)


def flat_config(d=2, n_target=2000, seed=1, **kw):
    cfg = constant_sigma_config(d, n_target, seed)
    return replace(cfg, **kw) if kw else cfg


class TestSimulate:
    def test_degenerate_config_constant_truth(self):
        cfg = flat_config(d=2, seed=3)
        cfg = replace(
            cfg,
            loadings=(1.0, 1.0),
            idio_vol=(0.0, 0.0),
            noise_variance=(0.0, 0.0),
        )
        sim = simulate(cfg)
        expect = cfg.vbar * np.ones((2, 2))
        for mat in sim.truth[:: len(sim.truth) // 7]:
            np.testing.assert_allclose(mat, expect, rtol=1e-12)

    def test_zero_noise_observations_on_efficient_path(self):
        cfg = flat_config(d=2, seed=4)
        cfg = replace(cfg, noise_variance=(0.0, 0.0))
        sim = simulate(cfg)
        for s, clean in zip(sim.panel.series, sim.clean):
            np.testing.assert_array_equal(s.log_prices, clean)

    def test_noisy_observations_off_the_path(self):
        sim = simulate(flat_config(d=1, seed=5))
        assert not np.allclose(sim.panel.series[0].log_prices, sim.clean[0])

    def test_ma1_noise_truth(self):
        cfg = flat_config(d=1, seed=6)
        omega2, theta = cfg.noise_variance[0], cfg.noise_ma_coeff[0]
        assert sim_long_run(cfg) == pytest.approx(omega2 * (1 + theta) ** 2, rel=1e-14)
        # empirical check: realized noise autocovariances match the population
        sim = simulate(replace(cfg, n_target=100_000))
        eps = sim.panel.series[0].log_prices - sim.clean[0]
        e0 = float(np.mean(eps * eps))
        e1 = float(np.mean(eps[1:] * eps[:-1]))
        assert e0 == pytest.approx(omega2 * (1 + theta**2), rel=0.05)
        assert e1 == pytest.approx(omega2 * theta, rel=0.10)

    def test_truth_psd_everywhere(self):
        sim = simulate(default_sim_config(3, 4000, 8))
        eigs = np.linalg.eigvalsh(sim.truth)
        assert eigs.min() >= -1e-18

    def test_seed_determinism(self):
        cfg = default_sim_config(2, 3000, 42)
        a, b = simulate(cfg), simulate(cfg)
        for sa, sb in zip(a.panel.series, b.panel.series):
            np.testing.assert_array_equal(sa.times, sb.times)
            np.testing.assert_array_equal(sa.log_prices, sb.log_prices)
        np.testing.assert_array_equal(a.truth, b.truth)

    def test_seasonal_normalization(self):
        cfg = default_sim_config(2, 2000, 1)
        t = np.linspace(0, 1, 20001)
        m = seasonal_fn(cfg, t)
        assert float(np.trapezoid(m * m, t)) == pytest.approx(1.0, abs=1e-6)

    def test_validation(self):
        with pytest.raises(ConfigError):
            replace(default_sim_config(2, 2000, 1), noise_ma_coeff=(1.5, 0.5))
        with pytest.raises(ConfigError):
            replace(default_sim_config(2, 2000, 1), poisson_intensity=(0.0, 10.0))


def sim_long_run(cfg):
    return float(cfg.noise_long_run[0])


class TestMetrics:
    def _paths(self, rng, M=3, T=11, d=3):
        truth = rng.uniform(0.5, 2.0, size=(M, T, d, d))
        truth = 0.5 * (truth + truth.transpose(0, 1, 3, 2))
        return truth

    def test_exact_estimate_zero(self):
        rng = np.random.default_rng(0)
        truth = self._paths(rng)
        m = mifb(list(truth), list(truth))
        assert m.value == 0.0 and m.root == 0.0

    def test_double_estimate_is_unit_mifb(self):
        rng = np.random.default_rng(1)
        truth = self._paths(rng)
        m = mifb(list(2.0 * truth), list(truth))
        assert m.value == pytest.approx(1.0, rel=1e-14)
        assert m.root == pytest.approx(1.0, rel=1e-14)

    def test_mise_c_undefined_for_d1(self):
        t = np.ones((4, 1, 1))
        with pytest.raises(ConfigError):
            mise_c(t, t)

    def test_decomposition_identity(self):
        rng = np.random.default_rng(2)
        d = 4
        truth = self._paths(rng, M=5, T=9, d=d)
        est = truth * rng.uniform(0.5, 1.5, size=truth.shape)
        v_all = mifb(list(est), list(truth)).value
        v_c = mise_c(list(est), list(truth)).value
        v_v = mise_v(list(est), list(truth)).value
        lhs = d * d * v_all
        rhs = 2.0 * (d * (d - 1) / 2.0) * v_c + d * v_v
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_small_truth_cells_excluded_and_counted(self):
        truth = np.ones((1, 4, 2, 2))
        truth[0, 2, 0, 1] = truth[0, 2, 1, 0] = 1e-20
        est = 1.5 * np.ones((1, 4, 2, 2))
        m = mifb([est[0]], [truth[0]])
        assert m.excluded_cells == 2
        # excluded cells contribute zero while normalizers stay fixed
        assert m.value == pytest.approx(0.25 * (16 - 2) / 16, rel=1e-12)


class TestMonteCarlo:
    def test_truth_oracle_instrumentation(self):
        cfg = flat_config(d=2, n_target=2000, seed=9)
        est_cfg = EstimatorConfig(theta_h=0.2, theta_j=2.0, theta_k=1.0)
        report = monte_carlo(
            cfg,
            [est_cfg],
            reps=1,
            estimator_fn=lambda sim, ec: (sim.truth.copy(), True),
        )
        row = report.rows[0]
        assert row.rmifb_pct == 0.0
        assert row.rmise_c_pct == 0.0
        assert row.rmise_v_pct == 0.0
        assert row.psd_pct == 100.0

    def test_seeded_determinism(self):
        cfg = flat_config(d=2, n_target=2500, seed=11)
        est_cfg = EstimatorConfig(theta_h=0.2, theta_j=2.0, theta_k=1.0, delta=0.15)
        r1 = monte_carlo(cfg, [est_cfg], reps=3, workers=1)
        r2 = monte_carlo(cfg, [est_cfg], reps=3, workers=1)
        assert r1 == r2

    def test_report_rendering(self):
        cfg = flat_config(d=2, n_target=2500, seed=12)
        est_cfg = EstimatorConfig(theta_h=0.2, theta_j=2.0, theta_k=1.0, delta=0.15)
        report = monte_carlo(cfg, [est_cfg], reps=2, workers=1)
        csv = report.to_csv()
        assert csv.splitlines()[0].startswith("theta_h,theta_j,theta_k,rmifb_pct")
        assert len(csv.splitlines()) == 2
        assert "RMIFB%" in report.to_text()

    def test_rmifb_decreases_with_denser_sampling(self):
        # noise-free synchronous dense sampling: error falls as n quadruples
        est_cfg = EstimatorConfig(theta_h=0.2, theta_j=3.0, theta_k=1.0, delta=0.15)
        means, ses = [], []
        from spotlmm.data import make_grid
        from spotlmm.lmm import prepare
        from spotlmm.noise import estimate_profile

        for n in (1500, 6000, 24000):
            vals = []
            for rep in range(10):
                cfg = flat_config(d=2, n_target=n, seed=100 + rep)
                cfg = replace(
                    cfg,
                    noise_variance=(0.0, 0.0),
                    poisson_intensity=(float(n), float(n)),
                )
                sim = simulate(cfg)
                grid = make_grid(est_cfg, sim.panel)
                profile = estimate_profile(sim.panel, 3, 0.05)
                bd = prepare(sim.panel, est_cfg, grid, profile=profile)
                est, _ = estimate_on_truth_grid(bd, grid, est_cfg, sim.truth_times)
                vals.append(mifb(est, sim.truth).root)
            vals = np.asarray(vals)
            means.append(vals.mean())
            ses.append(vals.std(ddof=1) / math.sqrt(len(vals)))
        for i in range(2):
            assert means[i + 1] < means[i] + 3.0 * math.hypot(ses[i], ses[i + 1])


class TestSpectralOrthogonality:
    def test_cross_frequency_products_average_to_zero(self):
        # synchronous equidistant noiseless Brownian data with unit volatility:
        # distinct frequencies are uncorrelated across blocks
        from spotlmm.data import BlockGrid, ObservationSeries, Panel
        from spotlmm.spectral import block_spectra

        rng = np.random.default_rng(21)
        B, reps, n = 25, 40, 50_000
        grid = BlockGrid(h=1.0 / B, num_blocks=B, J=3, K=1)
        times = np.linspace(0.0, 1.0, n)
        prods = []
        for _ in range(reps):
            y = np.concatenate([[0.0], np.cumsum(rng.standard_normal(n - 1))]) / math.sqrt(n - 1)
            panel = Panel((ObservationSeries("A", times, y),))
            stats = block_spectra(panel, grid)
            s = np.stack([st.values[:, 0] for st in stats])  # (B, J)
            prods.extend((s[:, 0] * s[:, 1]).tolist())
            prods.extend((s[:, 1] * s[:, 2]).tolist())
        prods = np.asarray(prods)
        n_samples = B * reps
        assert abs(prods[: n_samples].mean()) < 3.0 / math.sqrt(n_samples)
        assert abs(prods[n_samples:].mean()) < 3.0 / math.sqrt(n_samples)
