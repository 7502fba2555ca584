import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotlmm.data import (
    BlockGrid,
    EstimatorConfig,
    ObservationSeries,
    Panel,
    ingest_quotes,
    ingest_quotes_with_report,
    load_quote_csv,
    make_grid,
    render_records,
    window_bounds,
)
from spotlmm.errors import ConfigError, DataError


def panel_with_n(n):
    times = np.linspace(0.0, 1.0, n)
    prices = np.linspace(0.0, 0.01, n)
    return Panel((ObservationSeries("X", times, prices),))


class TestIngest:
    def test_duplicate_mids_keep_first(self):
        records = [
            ("A", 0.0, 100.0, 101.0),
            ("A", 1.0, 100.0, 101.0),  # same mid: dropped
            ("A", 2.0, 101.0, 102.0),
        ]
        panel = ingest_quotes(records, (0.0, 2.0))
        s = panel.series[0]
        assert s.n_p == 2
        assert s.times[0] == 0.0 and s.times[1] == 1.0

    def test_mid_quote_and_time_mapping(self):
        records = [("A", 10.0, 100.0, 101.0), ("A", 20.0, 102.0, 103.0)]
        panel = ingest_quotes(records, (10.0, 20.0))
        s = panel.series[0]
        assert s.times[0] == 0.0
        assert s.log_prices[0] == pytest.approx(math.log(100.5), abs=1e-15)
        assert s.times[1] == 1.0

    def test_synthetic_feed_with_13pct_revisions(self):
        # 1000 quotes; exactly 129 of the 999 mid returns are non-zero
        rng = np.random.default_rng(7)
        change_at = set(rng.choice(np.arange(1, 1000), size=129, replace=False).tolist())
        records = []
        mid = 100.0
        for i in range(1000):
            if i in change_at:
                mid += 0.01
            records.append(("A", float(i), mid - 0.005, mid + 0.005))
        panel = ingest_quotes(records, (0.0, 999.0))
        assert panel.series[0].n_p == 130

    def test_crossed_quotes_skipped_and_counted(self):
        records = [
            ("A", 0.0, 100.0, 101.0),
            ("A", 1.0, 105.0, 101.0),  # crossed
            ("A", 2.0, 101.0, 102.0),
        ]
        panel, report = ingest_quotes_with_report(records, (0.0, 2.0))
        assert report.crossed_skipped == 1
        assert panel.series[0].n_p == 2

    def test_empty_asset_rejected_by_name(self):
        records = [("GOOD", 0.0, 1.0, 2.0), ("GOOD", 1.0, 2.0, 3.0), ("BAD", 0.5, 1.0, 1.0)]
        with pytest.raises(DataError, match="BAD"):
            ingest_quotes(records, (0.0, 1.0))

    def test_outside_window_skipped(self):
        records = [
            ("A", -5.0, 100.0, 101.0),
            ("A", 0.0, 100.0, 101.0),
            ("A", 1.0, 102.0, 103.0),
        ]
        panel, report = ingest_quotes_with_report(records, (0.0, 1.0))
        assert report.outside_window == 1
        assert panel.series[0].n_p == 2

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.sampled_from(["A", "B"]),
                st.integers(min_value=0, max_value=999),
                st.integers(min_value=1, max_value=400),
            ),
            min_size=12,
            max_size=60,
        )
    )
    def test_ingestion_idempotent(self, raw):
        records = [(a, float(t), 100 + p / 100.0, 100 + p / 100.0 + 0.02) for a, t, p in raw]
        try:
            panel = ingest_quotes(records, (0.0, 999.0))
        except DataError:
            return  # degenerate draw (an asset with < 2 revisions)
        rendered = render_records(panel, (0.0, 1.0))
        panel2 = ingest_quotes(rendered, (0.0, 1.0))
        assert panel2.asset_ids == panel.asset_ids
        for s1, s2 in zip(panel.series, panel2.series):
            np.testing.assert_allclose(s2.times, s1.times, rtol=0, atol=1e-15)
            np.testing.assert_allclose(s2.log_prices, s1.log_prices, rtol=1e-12, atol=1e-15)


class TestCsv(object):
    def test_quote_and_price_formats(self, tmp_path):
        q = tmp_path / "q.csv"
        q.write_text("asset_id,timestamp,bid,ask\nA,0,100,101\nA,1000000,102,103\n")
        recs = load_quote_csv(str(q))
        assert recs[0] == ("A", 0.0, 100.0, 101.0)
        p = tmp_path / "p.csv"
        p.write_text("asset_id,timestamp,price\nA,2010-05-06T09:30:00.000,100.5\nA,2010-05-06T16:00:00.000,101.5\n")
        recs = load_quote_csv(str(p))
        assert recs[0][2] == recs[0][3] == 100.5
        assert recs[1][1] - recs[0][1] == pytest.approx(6.5 * 3600)

    def test_bad_header_rejected(self, tmp_path):
        f = tmp_path / "x.csv"
        f.write_text("time,px\n1,2\n")
        with pytest.raises(DataError, match="header"):
            load_quote_csv(str(f))


class TestMakeGrid:
    def test_block_length_formula(self):
        grid = make_grid(EstimatorConfig(theta_h=0.15), panel_with_n(10000))
        assert grid.h == pytest.approx(0.15 * math.log(10000) / 100.0, rel=1e-15)
        assert grid.h == pytest.approx(0.013815510557964276, rel=1e-12)
        assert grid.num_blocks == 73

    def test_spectral_cutoff_with_cap(self):
        grid = make_grid(EstimatorConfig(theta_h=0.15, theta_j=6.0), panel_with_n(10000))
        assert grid.J == 55  # floor(6 * log(10000)), cap at 138 not binding
        tight = make_grid(EstimatorConfig(theta_h=0.002, theta_j=6.0), panel_with_n(10000))
        assert tight.J == math.floor(10000 * tight.h) < 55

    def test_window_halfwidth_formula(self):
        grid = make_grid(
            EstimatorConfig(theta_k=2.0, delta=0.01), panel_with_n(10000)
        )
        assert grid.K == 19  # ceil(2 * 10000^0.24)

    def test_small_n_rejected(self):
        with pytest.raises(ConfigError):
            make_grid(EstimatorConfig(), panel_with_n(15))

    @settings(max_examples=60, deadline=None)
    @given(
        th1=st.floats(0.02, 0.5),
        th2=st.floats(0.02, 0.5),
        tk1=st.floats(0.1, 6.0),
        tk2=st.floats(0.1, 6.0),
        n=st.integers(100, 200000),
    )
    def test_monotone_in_tuning(self, th1, th2, tk1, tk2, n):
        panel = panel_with_n(n)
        g1 = make_grid(EstimatorConfig(theta_h=min(th1, th2), theta_k=min(tk1, tk2)), panel)
        g2 = make_grid(EstimatorConfig(theta_h=max(th1, th2), theta_k=max(tk1, tk2)), panel)
        assert g2.num_blocks <= g1.num_blocks
        assert g2.K >= g1.K


class TestWindowBounds:
    def grid80(self, K):
        return BlockGrid(h=0.0125, num_blocks=80, J=10, K=K)

    def test_left_boundary(self):
        assert window_bounds(self.grid80(5), 0.0, "two_sided") == (0, 5)

    def test_interior_two_sided(self):
        assert window_bounds(self.grid80(6), 0.5, "two_sided") == (34, 46)

    def test_one_sided_at_close(self):
        assert window_bounds(self.grid80(6), 1.0, "one_sided") == (67, 79)

    @settings(max_examples=30, deadline=None)
    @given(K=st.integers(0, 30), nb=st.integers(1, 300), side=st.sampled_from(["one_sided", "two_sided"]))
    def test_window_contains_block_and_is_bounded(self, K, nb, side):
        grid = BlockGrid(h=1.0 / nb, num_blocks=nb, J=1, K=K)
        for s in np.linspace(0.0, 1.0, 1000):
            L, U = window_bounds(grid, float(s), side)
            b = grid.block_of(float(s))
            assert L <= b <= U or (side == "one_sided" and U == b)
            assert L <= U
            assert U - L + 1 <= 2 * K + 1


class TestTypes:
    def test_series_validation(self):
        with pytest.raises(DataError):
            ObservationSeries("A", [0.0, 0.0], [1.0, 2.0])  # not strictly increasing
        with pytest.raises(DataError):
            ObservationSeries("A", [0.0, 1.5], [1.0, 2.0])  # outside [0, 1]
        with pytest.raises(DataError):
            ObservationSeries("A", [0.5], [1.0])  # too short

    def test_panel_min_count(self):
        s1 = ObservationSeries("A", [0.0, 0.5, 1.0], [0.0, 0.1, 0.2])
        s2 = ObservationSeries("B", [0.0, 1.0], [0.0, 0.1])
        panel = Panel((s1, s2))
        assert panel.n == 2 and panel.d == 2

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            EstimatorConfig(theta_h=-1.0)
        with pytest.raises(ConfigError):
            EstimatorConfig(delta=0.3)
        with pytest.raises(ConfigError):
            EstimatorConfig(j_pre=0)

    def test_series_is_immutable(self):
        s = ObservationSeries("A", [0.0, 1.0], [0.0, 0.1])
        with pytest.raises(ValueError):
            s.times[0] = 0.5
