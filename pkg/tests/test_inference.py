import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from spotlmm import normal
from spotlmm.inference import (
    avar_estimate,
    beta_avar,
    confidence_bands,
    corr_avar,
    sampling_cov,
    spot_beta,
    spot_correlation,
    symmetrizer_cov,
)
from spotlmm.lmm import SpotEstimate


def random_psd(rng, d, scale=1.0):
    a = rng.standard_normal((d, d))
    return scale * (a @ a.T + 0.05 * np.eye(d))


def make_estimate(sigma, window=(0, 9), s=0.5):
    return SpotEstimate(
        s=s, sigma=np.asarray(sigma, float), window=window, psd_adjusted=False
    )


class TestNormalQuantile:
    def test_against_scipy(self):
        for p in (1e-9, 1e-4, 0.025, 0.3, 0.5, 0.8, 0.975, 1 - 1e-6):
            assert normal.quantile(p) == pytest.approx(
                float(scipy.stats.norm.ppf(p)), rel=1e-8, abs=1e-10
            )

    def test_rejects_bad_input(self):
        for p in (0.0, 1.0, -0.1, 1.1):
            with pytest.raises(ValueError):
                normal.quantile(p)


class TestSymmetrizerCov:
    def test_scalar(self):
        np.testing.assert_array_equal(symmetrizer_cov(1), [[2.0]])

    def test_d2_matrix(self):
        expect = np.array(
            [
                [2.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 1.0, 0.0],
                [0.0, 1.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 2.0],
            ]
        )
        np.testing.assert_array_equal(symmetrizer_cov(2), expect)

    def test_symmetric_psd(self):
        for d in range(1, 7):
            z = symmetrizer_cov(d)
            np.testing.assert_array_equal(z, z.T)
            assert np.linalg.eigvalsh(z)[0] >= -1e-12

    @pytest.mark.parametrize("d", [1, 2, 3, 4])
    def test_matches_monte_carlo(self, d):
        # Cov(vec(ZZ')) estimated from 1e6 standard normal draws, with an
        # entrywise three-standard-error gate
        rng = np.random.default_rng(100 + d)
        n = 1_000_000
        chunk = 20_000
        d2 = d * d
        s1 = np.zeros(d2)
        s2 = np.zeros((d2, d2))
        s4 = np.zeros((d2, d2))
        for _ in range(n // chunk):
            x = rng.standard_normal((chunk, d))
            v = np.einsum("na,nb->nab", x, x).reshape(chunk, d2)
            s1 += v.sum(axis=0)
            prods = np.einsum("na,nb->nab", v, v)
            s2 += prods.sum(axis=0)
            s4 += (prods**2).sum(axis=0)
        mean = s1 / n
        cov = s2 / n - np.outer(mean, mean)
        var_of_prod = s4 / n - (s2 / n) ** 2
        se = np.sqrt(np.maximum(var_of_prod, 0.0) / n)
        z = symmetrizer_cov(d)
        assert np.all(np.abs(cov - z) <= 3.0 * se + 1e-4)


class TestAvarEstimate:
    def test_scalar_single_block(self):
        a = 1.7
        info = np.array([[0.5 / a**2]])
        v = avar_estimate([info])
        assert v[0, 0] == pytest.approx(2 * a * a, rel=1e-12)

    def test_identical_blocks_average(self):
        a = 0.9
        info = np.array([[0.5 / a**2]])
        v1 = avar_estimate([info])
        v5 = avar_estimate([info] * 5)
        np.testing.assert_allclose(v5, v1, rtol=1e-13)

    def test_quadruples_when_scale_doubles(self):
        a = 0.37
        v1 = avar_estimate([np.array([[0.5 / a**2]])])
        v2 = avar_estimate([np.array([[0.5 / (2 * a) ** 2]])])
        assert v2[0, 0] == pytest.approx(4 * v1[0, 0], rel=1e-12)

    def test_per_frequency_stacks(self):
        rng = np.random.default_rng(0)
        infos = [np.stack([random_psd(rng, 2).reshape(1, 2, 2)[0] for _ in range(3)]) for _ in range(2)]
        # summing over frequencies first must equal passing summed blocks
        v1 = avar_estimate(infos)
        v2 = avar_estimate([i.sum(axis=0) for i in infos])
        np.testing.assert_allclose(v1, v2, rtol=1e-12)


class TestConfidenceBands:
    def test_scalar_half_width(self):
        vhat = np.array([[3.1e-8]])
        est = make_estimate([[1e-4]], window=(0, 10))
        res = confidence_bands(est, vhat, 0.95)
        z = normal.quantile(0.975)
        # marginal variance of a variance entry is (P V P)_rr / win = vhat / win
        expect = z * math.sqrt(vhat[0, 0] / 11)
        assert res.sigma_upper[0, 0] - est.sigma[0, 0] == pytest.approx(expect, rel=1e-12)

    def test_zero_variance_degenerate(self):
        est = make_estimate(np.diag([1.0, 2.0]))
        res = confidence_bands(est, np.zeros((4, 4)), 0.95)
        np.testing.assert_array_equal(res.sigma_lower, est.sigma)
        np.testing.assert_array_equal(res.sigma_upper, est.sigma)

    def test_half_width_scales_with_window(self):
        rng = np.random.default_rng(1)
        sigma = random_psd(rng, 2)
        vhat = random_psd(rng, 4, scale=1e-3)
        res1 = confidence_bands(make_estimate(sigma, window=(0, 9)), vhat, 0.9)
        res2 = confidence_bands(make_estimate(sigma, window=(0, 19)), vhat, 0.9)
        h1 = res1.sigma_upper - res1.estimate.sigma
        h2 = res2.sigma_upper - res2.estimate.sigma
        np.testing.assert_allclose(h2, h1 / math.sqrt(2.0), rtol=1e-12)

    def test_band_ordering_and_correlation_clipping(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            d = int(rng.integers(2, 5))
            sigma = random_psd(rng, d)
            vhat = random_psd(rng, d * d, scale=np.abs(sigma).max() ** 2)
            res = confidence_bands(make_estimate(sigma, window=(3, 7)), vhat, 0.95)
            assert np.all(res.sigma_lower <= res.estimate.sigma + 1e-15)
            assert np.all(res.estimate.sigma <= res.sigma_upper + 1e-15)
            for c in res.correlations:
                assert -1.0 <= c.lower <= c.value <= c.upper <= 1.0
            for b in res.betas:
                assert b.lower <= b.value <= b.upper


class TestDeltaMethod:
    def test_identity_collapse(self):
        vhat = random_psd(np.random.default_rng(3), 4)
        av = corr_avar(np.eye(2), vhat, 0, 1)
        assert av == pytest.approx(vhat[1, 1], rel=1e-12)

    def test_correlation_point_value(self):
        est = make_estimate([[4.0, 2.0], [2.0, 4.0]])
        out = spot_correlation(est, np.eye(4) * 1e-6)
        rho, _ = out[(0, 1)]
        assert rho == pytest.approx(0.5, rel=1e-14)

    def test_beta_point_value(self):
        est = make_estimate([[2.0, 1.0], [1.0, 3.0]])
        out = spot_beta(est, np.eye(4) * 1e-6)
        assert out[(0, 1)][0] == pytest.approx(0.5, rel=1e-14)
        assert out[(1, 0)][0] == pytest.approx(1.0 / 3.0, rel=1e-14)

    def test_beta_identity_collapse(self):
        vhat = random_psd(np.random.default_rng(4), 4)
        av = beta_avar(np.eye(2), vhat, 0, 1)
        assert av == pytest.approx(vhat[1, 1], rel=1e-12)

    def _fd_avar(self, func, sigma, vhat):
        d = sigma.shape[0]
        base = sigma.reshape(-1).astype(float)
        g = np.zeros(d * d)
        for r in range(d * d):
            h = 1e-6 * max(abs(base[r]), np.abs(sigma).max())
            up, dn = base.copy(), base.copy()
            up[r] += h
            dn[r] -= h
            g[r] = (func(up.reshape(d, d)) - func(dn.reshape(d, d))) / (2 * h)
        return float(g @ vhat @ g)

    @pytest.mark.parametrize("kind", ["corr", "beta"])
    def test_finite_difference_oracle(self, kind):
        rng = np.random.default_rng(5)
        for _ in range(200):
            d = int(rng.integers(2, 5))
            sigma = random_psd(rng, d, scale=10.0 ** rng.uniform(-2, 2))
            vhat = random_psd(rng, d * d, scale=float(np.abs(sigma).max() ** 2))
            p, q = rng.choice(d, size=2, replace=False)
            p, q = int(p), int(q)
            if kind == "corr":
                got = corr_avar(sigma, vhat, p, q)
                fd = self._fd_avar(
                    lambda m: m[p, q] / math.sqrt(m[p, p] * m[q, q]), sigma, vhat
                )
            else:
                got = beta_avar(sigma, vhat, p, q)
                fd = self._fd_avar(lambda m: m[p, q] / m[p, p], sigma, vhat)
            assert got == pytest.approx(fd, rel=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_scale_invariance_of_correlation_avar(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(2, 5))
        sigma = random_psd(rng, d)
        vhat = random_psd(rng, d * d)
        scale = np.diag(rng.uniform(0.2, 5.0, d))
        big = np.kron(scale, scale)
        av1 = corr_avar(sigma, vhat, 0, 1)
        av2 = corr_avar(scale @ sigma @ scale, big @ vhat @ big, 0, 1)
        assert av2 == pytest.approx(av1, rel=1e-10)


class TestSamplingCov:
    def test_scalar_passthrough(self):
        v = np.array([[4.0]])
        np.testing.assert_allclose(sampling_cov(v, 4), [[1.0]])

    def test_symmetric_sandwich(self):
        rng = np.random.default_rng(6)
        v = random_psd(rng, 9)
        c = sampling_cov(v, 3)
        np.testing.assert_allclose(c, c.T, atol=1e-14)
        assert np.linalg.eigvalsh(c)[0] >= -1e-12
