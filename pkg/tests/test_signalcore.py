import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pulsefuse.errors import (
    DegenerateInput,
    EmptyInput,
    InvalidBand,
    NoPulse,
    SignalTooShort,
    TooFewPeaks,
)
from pulsefuse.signalcore import (
    BandLimits,
    SampledSignal,
    bandpass,
    bland_altman,
    detect_peaks,
    estimate_hr,
    hr_metrics,
    hrv_metrics,
    pearson,
    resample_linear,
    welch_psd,
)


def dft_peak_amplitude(x, rate, f0, nfft=8192):
    """Amplitude of the strongest line near f0 by a direct (zero-padded) DFT sum."""
    n = len(x)
    k = np.arange(nfft // 2)
    freqs = k * rate / nfft
    sel = np.abs(freqs - f0) < 0.2
    t = np.arange(n)
    basis = np.exp(-2j * np.pi * np.outer(k[sel], t) / nfft)
    return 2 * np.max(np.abs(basis @ x)) / n


def sine(f, rate, n, phase=0.0):
    return np.sin(2 * np.pi * f * np.arange(n) / rate + phase)


class TestBandpass:
    def test_constant_is_removed(self):
        out = bandpass(SampledSignal(np.full(300, 5.0), 30.0))
        assert np.max(np.abs(out.samples)) < 1e-6

    def test_passband_sinusoid(self):
        x = sine(1.5, 30, 600)
        y = bandpass(SampledSignal(x, 30.0)).samples
        interior = slice(100, 500)
        a_in = dft_peak_amplitude(x[interior], 30, 1.5)
        a_out = dft_peak_amplitude(y[interior], 30, 1.5)
        assert abs(a_out / a_in - 1.0) < 0.05
        assert abs(a_out - 1.0) < 0.05

    def test_stopband_attenuation(self):
        x = sine(0.1, 30, 600)
        y = bandpass(SampledSignal(x, 30.0)).samples
        gain = dft_peak_amplitude(y, 30, 0.1) / dft_peak_amplitude(x, 30, 0.1)
        assert 20 * math.log10(gain) <= -20

    def test_zero_phase(self):
        x = sine(1.2, 30, 600)
        y = bandpass(SampledSignal(x, 30.0)).samples
        lags = np.arange(-5, 6)
        xc = [np.dot(x[100:500], np.roll(y, -lag)[100:500]) for lag in lags]
        assert lags[int(np.argmax(xc))] == 0

    def test_errors(self):
        with pytest.raises(SignalTooShort):
            bandpass(SampledSignal(np.ones(15), 30.0))
        with pytest.raises(InvalidBand):
            bandpass(SampledSignal(np.ones(100), 30.0), BandLimits(3.0, 0.5))
        with pytest.raises(InvalidBand):
            bandpass(SampledSignal(np.ones(100), 30.0), BandLimits(0.5, 15.0))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(2, 200))
        lhs = bandpass(SampledSignal(alpha * x + beta * y, 30.0)).samples
        rhs = alpha * bandpass(SampledSignal(x, 30.0)).samples + beta * bandpass(
            SampledSignal(y, 30.0)
        ).samples
        scale = max(1.0, np.max(np.abs(rhs)))
        assert np.max(np.abs(lhs - rhs)) <= 1e-9 * scale


class TestWelch:
    def test_sinusoid_peak_bin(self):
        spec = welch_psd(SampledSignal(sine(1.2, 30, 160), 30.0), seg_len=160, nfft=4096)
        df = 30 / 4096
        assert spec.df == pytest.approx(df)
        # zero-padded DFT oracle of the Hamming-windowed segment
        x = sine(1.2, 30, 160) * np.hamming(160)
        oracle = np.abs(np.fft.rfft(x, 4096)) ** 2
        assert abs(int(np.argmax(spec.power)) - int(np.argmax(oracle))) <= 1
        assert abs(spec.freqs_hz[np.argmax(spec.power)] - 1.2) <= df

    def test_white_noise_spread(self):
        for seed in range(100):
            x = np.random.default_rng(seed).normal(size=600)
            spec = welch_psd(SampledSignal(x, 30.0))
            assert spec.power.max() <= 0.2 * spec.power.sum()

    def test_constant_all_power_in_dc(self):
        spec = welch_psd(SampledSignal(np.full(300, 2.0), 30.0))
        assert spec.power[0] > 0
        assert np.all(spec.power[1:] == 0)

    def test_parseval_scaling(self):
        x = np.random.default_rng(0).normal(size=4096) + 0.3
        spec = welch_psd(SampledSignal(x, 30.0), seg_len=256)
        assert spec.power.sum() * spec.df == pytest.approx(np.mean(x**2), rel=0.1)

    def test_errors(self):
        with pytest.raises(SignalTooShort):
            welch_psd(SampledSignal(np.ones(10), 30.0), seg_len=20)


class TestEstimateHr:
    @pytest.mark.parametrize("f, bpm", [(1.2, 72.0), (2.5, 150.0)])
    def test_sinusoid(self, f, bpm):
        spec = welch_psd(SampledSignal(sine(f, 30, 160), 30.0), seg_len=160, nfft=4096)
        assert estimate_hr(spec) == pytest.approx(bpm, abs=0.5)

    def test_constant_no_pulse(self):
        with pytest.raises(NoPulse):
            estimate_hr(welch_psd(SampledSignal(np.full(160, 3.0), 30.0)))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.55, 2.95), st.floats(0, 6.28))
    def test_within_one_bin(self, f, phase):
        spec = welch_psd(SampledSignal(sine(f, 30, 300, phase), 30.0))
        assert abs(estimate_hr(spec) - 60 * f) <= 60 * spec.df + 1e-9

    def test_tie_break_lowest(self):
        from pulsefuse.signalcore import Spectrum

        freqs = np.linspace(0, 4, 41)
        power = np.zeros(41)
        power[[12, 20]] = 1.0
        assert estimate_hr(Spectrum(freqs, power)) == pytest.approx(72.0)


class TestPearson:
    def test_cases(self):
        assert pearson([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
        # oracle: direct formula by hand -> cov 1.0 / (var 1.25) = 0.8
        assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateInput):
            pearson([1, 1, 1], [1, 2, 3])


class TestHrMetrics:
    def test_identity(self):
        m = hr_metrics([60, 80, 100], [60, 80, 100])
        assert (m.mae_bpm, m.mape_pct, m.rmse_bpm) == (0, 0, 0)
        assert m.pearson_r == pytest.approx(1.0)

    def test_offset(self):
        m = hr_metrics([62, 82, 102], [60, 80, 100])
        assert m.mae_bpm == pytest.approx(2.0)
        assert m.rmse_bpm == pytest.approx(2.0)
        assert m.pearson_r == pytest.approx(1.0)

    def test_swap(self):
        m = hr_metrics([70, 80], [80, 70])
        assert m.mae_bpm == 10 and m.rmse_bpm == 10
        assert m.pearson_r == pytest.approx(-1.0)
        assert m.mape_pct == pytest.approx((10 / 80 + 10 / 70) / 2 * 100)

    def test_single_pair_rho_undefined(self):
        m = hr_metrics([70], [72])
        assert m.mae_bpm == 2 and math.isnan(m.pearson_r)

    def test_empty(self):
        with pytest.raises(EmptyInput):
            hr_metrics([], [])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(30, 200), st.floats(30, 200)), min_size=1, max_size=50))
    def test_mae_le_rmse(self, pairs):
        est, ref = zip(*pairs)
        m = hr_metrics(est, ref)
        assert m.mae_bpm <= m.rmse_bpm + 1e-12


class TestBlandAltman:
    def test_identity(self):
        x = np.array([60.0, 75.0, 90.0, 110.0])
        ba = bland_altman(x, x)
        assert ba.bias_bpm == 0 and ba.loa_hi_bpm - ba.loa_lo_bpm == 0
        assert ba.within_pct == 100

    def test_offset(self):
        ba = bland_altman([65, 85, 105], [60, 80, 100])
        assert ba.bias_bpm == pytest.approx(5.0)
        assert ba.loa_hi_bpm - ba.loa_lo_bpm == pytest.approx(0.0, abs=1e-12)

    def test_two_differences(self):
        ba = bland_altman([79, 81], [80, 80])
        assert ba.bias_bpm == 0
        assert ba.loa_hi_bpm == pytest.approx(1.96 * math.sqrt(2))
        assert ba.loa_lo_bpm == pytest.approx(-1.96 * math.sqrt(2))

    def test_too_few(self):
        with pytest.raises(EmptyInput):
            bland_altman([1.0], [1.0])


def brute_force_peaks(x, median):
    return [i for i in range(1, len(x) - 1) if x[i] > x[i - 1] and x[i] > x[i + 1] and x[i] > median]


class TestPeaks:
    def test_sinusoid(self):
        # peaks fall exactly on samples 6, 36, ..., 276
        t = np.arange(300) / 30
        x = np.cos(2 * np.pi * (t - 0.2))
        idx = detect_peaks(SampledSignal(x, 30.0), 0.5)
        assert len(idx) == 10
        assert np.all(np.abs(np.diff(idx) - 30) <= 1)

    def test_constant(self):
        assert detect_peaks(SampledSignal(np.ones(100), 30.0), 0.3).size == 0

    def test_two_tone_matches_scan(self):
        t = np.arange(600) / 30
        x = np.sin(2 * np.pi * 1.1 * t) + 0.3 * np.sin(2 * np.pi * 0.13 * t + 0.4)
        idx = detect_peaks(SampledSignal(x, 30.0), 0.1)
        assert idx.tolist() == brute_force_peaks(x, np.median(x))

    def test_thinning(self):
        x = np.zeros(40)
        x[[10, 12, 30]] = [1.0, 2.0, 1.5]
        idx = detect_peaks(SampledSignal(x, 10.0), 0.5)
        assert idx.tolist() == [12, 30]


class TestHrv:
    def test_regular(self):
        r = hrv_metrics(np.arange(10) * 800.0)
        assert (r.sdnn_ms, r.sdsd_ms, r.sd2_ms, r.ppa_ms2) == (0, 0, 0, 0)

    def test_alternating(self):
        nn = np.tile([750.0, 850.0], 10)
        r = hrv_metrics(np.concatenate([[0.0], np.cumsum(nn)]))
        assert r.sdnn_ms == 50.0
        assert r.sdsd_ms == 100.0
        assert r.sd2_ms == 0.0
        assert r.ppa_ms2 == 0.0

    def test_identity_random(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            nn = rng.uniform(400, 1200, size=rng.integers(2, 60))
            r = hrv_metrics(np.concatenate([[0.0], np.cumsum(nn)]))
            if r.sd2_clamped:
                continue
            assert r.sd1_ms**2 + r.sd2_ms**2 == pytest.approx(2 * r.sdnn_ms**2, rel=1e-9)
            assert r.ppa_ms2 == pytest.approx(math.pi * r.sd1_ms * r.sd2_ms)

    def test_clamp_is_reported(self):
        # strictly alternating with a small trend: radicand goes negative
        nn = np.array([700.0, 900.0, 700.0, 900.0, 700.0])
        r = hrv_metrics(np.concatenate([[0.0], np.cumsum(nn)]))
        assert r.sd2_clamped and r.sd2_ms == 0.0

    def test_too_few(self):
        with pytest.raises(TooFewPeaks):
            hrv_metrics([0.0, 800.0])


class TestResample:
    def test_ramp(self):
        out = resample_linear(SampledSignal([0.0, 1.0, 2.0], 1.0), 2.0)
        assert out.samples.tolist() == [0, 0.5, 1, 1.5, 2]
        assert out.rate_hz == 2.0

    def test_same_rate(self):
        x = np.random.default_rng(0).normal(size=50)
        assert np.array_equal(resample_linear(SampledSignal(x, 20.0), 20.0).samples, x)

    def test_sinusoid(self):
        t = np.arange(200) / 20
        out = resample_linear(SampledSignal(np.sin(2 * np.pi * t), 20.0), 30.0)
        t_new = np.arange(len(out)) / 30
        assert np.max(np.abs(out.samples - np.sin(2 * np.pi * t_new))) < 0.02

    def test_too_short(self):
        with pytest.raises(SignalTooShort):
            resample_linear(SampledSignal([1.0], 20.0), 30.0)
