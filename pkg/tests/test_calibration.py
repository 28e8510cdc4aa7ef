import math

import numpy as np
import pytest

from qkdstation.calibration import (
    calibrate_from_stimulus,
    code_density_calibrate,
    decorrelation_cable_delay,
    precision_test,
    read_calibration_csv,
    table_from_profile,
    table_from_widths,
    uniform_phase_histogram,
    write_calibration_csv,
)
from qkdstation.errors import CalibrationError, ConfigError
from qkdstation.seeding import derive_rng
from qkdstation.tdc import (
    ChannelState,
    TdcConfig,
    build_delay_line,
    digitize_stream,
    reconstruct_stream,
)


def small_config():
    return TdcConfig(clock_period=100.0, n_taps=4, n_channels=2)


class TestCodeDensity:
    def test_exact_proportions_closed_form(self):
        # taps [20, 30, 25, 25] over 100 ps with counts in exact proportion
        cfg = small_config()
        hist = np.array([200, 300, 250, 250, 0])
        table = code_density_calibrate(hist, cfg)
        np.testing.assert_allclose(table.bin_widths[:4], [20.0, 30.0, 25.0, 25.0])
        assert table.lsb == pytest.approx(25.0)
        np.testing.assert_allclose(table.dnl, [-0.2, +0.2, 0.0, 0.0])
        np.testing.assert_allclose(table.inl, [0.0, -0.2, 0.0, 0.0, 0.0], atol=1e-12)

    def test_uniform_line_million_hits(self):
        cfg = small_config()
        p = build_delay_line(cfg)
        hist = uniform_phase_histogram(p, 1_000_000, np.random.default_rng(1))
        table = code_density_calibrate(hist, cfg)
        assert np.all(np.abs(table.dnl) < 0.01)

    def test_empty_histogram_rejected(self):
        with pytest.raises(CalibrationError, match="empty"):
            code_density_calibrate(np.zeros(5, dtype=int), small_config())

    def test_single_dominant_bin_rejected(self):
        hist = np.array([900, 50, 30, 20, 0])
        with pytest.raises(CalibrationError, match="broken"):
            code_density_calibrate(hist, small_config())

    def test_wrong_length_rejected(self):
        with pytest.raises(CalibrationError):
            code_density_calibrate(np.ones(4, dtype=int), small_config())

    def test_mean_dnl_zero_and_inl_closed(self):
        cfg = TdcConfig()
        p = build_delay_line(cfg, "random:-0.5:0.5", seed=7)
        table = calibrate_from_stimulus(p, cfg, 200_000, np.random.default_rng(2))
        assert abs(table.dnl.mean()) < 1e-9
        assert table.inl[0] == 0.0
        assert abs(table.inl[-1]) < 1e-9
        assert table.bin_widths.sum() == pytest.approx(cfg.clock_period, rel=1e-6)

    def test_centers_convention(self):
        cfg = small_config()
        p = build_delay_line(cfg)
        table = table_from_profile(p, cfg)
        # code 0 reads as the clock edge; code 1 as the midpoint of [25, 50)
        np.testing.assert_allclose(table.bin_centers, [0.0, 37.5, 62.5, 87.5, 100.0])


class TestDnlRecovery:
    def test_injected_band_recovered(self):
        # deviations spanning the -1..+3 LSB band (kept strictly above -1
        # so every tap stays physical)
        cfg = TdcConfig()
        nominal = cfg.nominal_tap
        dev = np.zeros(cfg.n_taps)
        dev[10] = -0.97 * nominal
        dev[50] = +3.0 * nominal
        dev[120] = -0.5 * nominal
        dev[200] = +1.5 * nominal
        p = build_delay_line(cfg, dev)
        table = calibrate_from_stimulus(p, cfg, 1_000_000, np.random.default_rng(3))
        # recovered widths must match the true (renormalized) line
        err = (table.bin_widths[: cfg.n_taps] - p.tap_delays) / table.lsb
        assert np.max(np.abs(err)) < 0.1
        assert abs(table.inl[-1]) < 1e-9

    def test_consistency_against_true_profile(self):
        # reconstructing with a measured table agrees with the true table
        # within 0.2 LSB rms
        cfg = TdcConfig()
        p = build_delay_line(cfg, "random:-0.4:0.4", seed=13)
        measured = calibrate_from_stimulus(p, cfg, 1_000_000, np.random.default_rng(5))
        truth = table_from_profile(p, cfg)
        rng = np.random.default_rng(11)
        gaps = cfg.dead_time + rng.random(20_000) * 1e5
        times = np.cumsum(gaps)
        batch = digitize_stream(times, p, ChannelState(), cfg)
        ts_m = reconstruct_stream(batch.coarse, batch.fine, measured, cfg)
        ts_t = reconstruct_stream(batch.coarse, batch.fine, truth, cfg)
        rms = float(np.sqrt(np.mean((ts_m - ts_t) ** 2)))
        assert rms < 0.2 * truth.lsb


class TestPrecision:
    def test_zero_jitter_matches_quantization_oracle(self):
        cfg = TdcConfig()
        pa = build_delay_line(cfg, channel=0)
        pb = build_delay_line(cfg, channel=1)
        delay = decorrelation_cable_delay(cfg)
        report = precision_test(pa, pb, cfg, 100_000.0, delay, 100_000, seed=1)
        assert report.per_channel_rms == pytest.approx(
            cfg.nominal_tap / math.sqrt(12.0), abs=0.2
        )
        assert report.mean_interval == pytest.approx(delay, abs=1.0)

    def test_rms_composition_over_sigma_sweep(self):
        cfg = TdcConfig()
        delay = decorrelation_cable_delay(cfg)
        lsb = cfg.nominal_tap
        for sigma in (0.0, 5.0, 10.0, 15.0, 20.0):
            pa = build_delay_line(cfg, jitter_sigma=sigma, channel=0)
            pb = build_delay_line(cfg, jitter_sigma=sigma, channel=1)
            report = precision_test(pa, pb, cfg, 100_000.0, delay, 50_000, seed=2)
            analytic = lsb**2 / 12.0 + sigma**2
            assert report.per_channel_rms**2 == pytest.approx(analytic, rel=0.10)

    def test_zero_cable_delay_zero_mean(self):
        cfg = TdcConfig()
        pa = build_delay_line(cfg, channel=0)
        pb = build_delay_line(cfg, channel=1)
        report = precision_test(pa, pb, cfg, 100_000.0, 0.0, 10_000, seed=3)
        assert abs(report.mean_interval) < 1.0

    def test_sqrt2_relation_exact(self):
        cfg = TdcConfig()
        pa = build_delay_line(cfg, channel=0)
        pb = build_delay_line(cfg, channel=1)
        r = precision_test(pa, pb, cfg, 100_000.0, 500.0, 10_000, seed=4)
        assert r.per_channel_rms == r.raw_std / math.sqrt(2.0)

    def test_period_below_dead_time_refused(self):
        cfg = TdcConfig()
        pa = build_delay_line(cfg, channel=0)
        pb = build_delay_line(cfg, channel=1)
        with pytest.raises(ConfigError, match="dead time"):
            precision_test(pa, pb, cfg, 20_000.0, 500.0, 10_000, seed=5)

    def test_too_few_pulses_refused(self):
        cfg = TdcConfig()
        pa = build_delay_line(cfg, channel=0)
        pb = build_delay_line(cfg, channel=1)
        with pytest.raises(ConfigError, match="1e4"):
            precision_test(pa, pb, cfg, 100_000.0, 500.0, 9_999, seed=6)


class TestTableIO:
    def test_csv_roundtrip(self, tmp_path):
        cfg = TdcConfig()
        p = build_delay_line(cfg, "sine:0.3:4")
        table = table_from_profile(p, cfg)
        path = tmp_path / "cal.csv"
        write_calibration_csv(table, path)
        rows = read_calibration_csv(path)
        assert len(rows) == table.occupied.size
        codes = [r[0] for r in rows]
        assert codes == list(table.occupied)
        # final row carries the period-closure INL
        assert rows[-1][3] == pytest.approx(0.0, abs=1e-6)

    def test_rebuild_from_stored_widths(self):
        cfg = TdcConfig()
        p = build_delay_line(cfg, "random:-0.3:0.3", seed=8)
        full = table_from_profile(p, cfg)
        rebuilt = table_from_widths(0, full.bin_widths[: cfg.n_taps], cfg)
        np.testing.assert_allclose(rebuilt.bin_centers, full.bin_centers)
        assert rebuilt.lsb == full.lsb


def test_stimulus_histogram_covers_all_codes():
    cfg = TdcConfig()
    p = build_delay_line(cfg)
    hist = uniform_phase_histogram(p, 1_000_000, derive_rng(0, "x"))
    assert hist[: cfg.n_taps].min() > 0
    assert hist[cfg.n_taps] == 0  # jitter-free stimulus never tops out
