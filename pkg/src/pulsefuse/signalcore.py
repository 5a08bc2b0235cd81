"""Waveform primitives: filtering, spectral estimation, HR readout, agreement
metrics and HRV descriptors.

Every function here is pure; nothing keeps state between calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .errors import (
    DegenerateInput,
    EmptyInput,
    InvalidBand,
    NoPulse,
    SignalTooShort,
    TooFewPeaks,
)

MIN_FILTER_LEN = 16
NO_PULSE_REL_POWER = 1e-12
WELCH_NFFT = 4096
WELCH_MAX_SEG = 256
WELCH_OVERLAP = 0.5


@dataclass(frozen=True)
class SampledSignal:
    samples: np.ndarray
    rate_hz: float
    t0_ms: int = 0

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if not (math.isfinite(self.rate_hz) and self.rate_hz > 0):
            raise ValueError(f"rate_hz must be finite and positive, got {self.rate_hz}")

    def __len__(self) -> int:
        return len(self.samples)

    def times_ms(self) -> np.ndarray:
        return self.t0_ms + np.arange(len(self.samples)) * (1000.0 / self.rate_hz)


@dataclass(frozen=True)
class BandLimits:
    lo_hz: float = 0.5
    hi_hz: float = 3.0

    def check(self, rate_hz: float) -> None:
        if not (0 < self.lo_hz < self.hi_hz < rate_hz / 2):
            raise InvalidBand(
                f"band [{self.lo_hz}, {self.hi_hz}] Hz invalid at rate {rate_hz} Hz"
            )


DEFAULT_BAND = BandLimits()


@dataclass(frozen=True)
class Spectrum:
    freqs_hz: np.ndarray
    power: np.ndarray

    @property
    def df(self) -> float:
        return float(self.freqs_hz[1] - self.freqs_hz[0])


@dataclass(frozen=True)
class MetricsReport:
    mae_bpm: float
    mape_pct: float
    rmse_bpm: float
    pearson_r: float  # nan when undefined
    n: int


@dataclass(frozen=True)
class BlandAltman:
    bias_bpm: float
    loa_lo_bpm: float
    loa_hi_bpm: float
    within_pct: float


@dataclass(frozen=True)
class HrvReport:
    sdnn_ms: float
    sdsd_ms: float
    sd1_ms: float
    sd2_ms: float
    ppa_ms2: float
    sd2_clamped: bool = field(default=False)


def bandpass(sig: SampledSignal, band: BandLimits = DEFAULT_BAND) -> SampledSignal:
    """Zero-phase band-pass: second-order Butterworth run forward and backward."""
    if len(sig) < MIN_FILTER_LEN:
        raise SignalTooShort(f"bandpass needs >= {MIN_FILTER_LEN} samples, got {len(sig)}")
    band.check(sig.rate_hz)
    sos = sps.butter(2, [band.lo_hz, band.hi_hz], btype="bandpass", fs=sig.rate_hz, output="sos")
    # default padlen exceeds very short inputs
    padlen = min(3 * (2 * len(sos) + 1), len(sig) - 1)
    out = sps.sosfiltfilt(sos, sig.samples, padlen=padlen)
    return SampledSignal(out, sig.rate_hz, sig.t0_ms)


def welch_psd(
    sig: SampledSignal,
    seg_len: int | None = None,
    overlap_frac: float = WELCH_OVERLAP,
    nfft: int = WELCH_NFFT,
) -> Spectrum:
    """Overlap-averaged Hamming periodogram, one-sided, in units^2/Hz.

    The segment mean is handled exactly: its power m^2/df goes to bin 0 and the
    Hamming window is applied to the mean-removed remainder, so a constant
    input puts all of its power in bin 0.  With this scaling
    ``sum(power) * df`` approximates the mean square of the input.
    """
    n = len(sig)
    if seg_len is None:
        seg_len = min(n, WELCH_MAX_SEG)
    if n < 2 or seg_len > n or seg_len < 2:
        raise SignalTooShort(f"welch_psd: seg_len={seg_len} with {n} samples")
    if not 0 <= overlap_frac < 1:
        raise ValueError("overlap_frac must lie in [0, 1)")
    if nfft < seg_len:
        raise ValueError("nfft must be >= seg_len")
    noverlap = int(seg_len * overlap_frac)
    freqs, power = sps.welch(
        sig.samples,
        fs=sig.rate_hz,
        window="hamming",
        nperseg=seg_len,
        noverlap=noverlap,
        nfft=nfft,
        detrend="constant",
        scaling="density",
    )
    step = seg_len - noverlap
    starts = range(0, n - seg_len + 1, step)
    dc = np.mean([np.mean(sig.samples[s : s + seg_len]) ** 2 for s in starts])
    power = power.copy()
    power[0] += dc / (freqs[1] - freqs[0])
    return Spectrum(freqs, power)


def estimate_hr(spec: Spectrum, band: BandLimits = DEFAULT_BAND) -> float:
    """Dominant in-band frequency in beats per minute (ties go to the lowest)."""
    mask = (spec.freqs_hz >= band.lo_hz) & (spec.freqs_hz <= band.hi_hz)
    if mask.sum() < 3:
        raise InvalidBand("fewer than 3 spectral bins inside the band")
    inband = spec.power[mask]
    total = float(np.sum(spec.power))
    if not total > 0 or float(np.sum(inband)) < NO_PULSE_REL_POWER * total:
        raise NoPulse("no in-band power")
    return 60.0 * float(spec.freqs_hz[mask][np.argmax(inband)])


def hr_from_waveform(sig: SampledSignal, band: BandLimits = DEFAULT_BAND) -> float:
    """bandpass -> welch -> estimate_hr, the standard post-processing chain."""
    return estimate_hr(welch_psd(bandpass(sig, band)), band)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("pearson expects two 1-D arrays of equal length")
    if len(a) < 2:
        raise EmptyInput("pearson needs at least 2 samples")
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(da @ da))
    sb = math.sqrt(float(db @ db))
    if sa == 0 or sb == 0:
        raise DegenerateInput("constant series has no correlation")
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def hr_metrics(est, ref) -> MetricsReport:
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError("est and ref must have equal length")
    if est.size == 0:
        raise EmptyInput("no HR pairs")
    err = est - ref
    mae = float(np.mean(np.abs(err)))
    mape = float(np.mean(np.abs(err) / ref) * 100.0)
    rmse = float(np.sqrt(np.mean(err**2)))
    try:
        rho = pearson(est, ref)
    except (DegenerateInput, EmptyInput):
        rho = float("nan")
    return MetricsReport(mae, mape, rmse, rho, int(est.size))


def bland_altman(est, ref) -> BlandAltman:
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError("est and ref must have equal length")
    if est.size < 2:
        raise EmptyInput("bland_altman needs at least 2 pairs")
    diff = est - ref
    bias = float(np.mean(diff))
    sd = float(np.std(diff, ddof=1))
    lo, hi = bias - 1.96 * sd, bias + 1.96 * sd
    within = float(np.mean((diff >= lo) & (diff <= hi)) * 100.0)
    return BlandAltman(bias, lo, hi, within)


def detect_peaks(sig: SampledSignal, min_dist_s: float) -> np.ndarray:
    """Strict local maxima above the median, thinned tallest-first."""
    if min_dist_s <= 0:
        raise ValueError("min_dist_s must be positive")
    x = sig.samples
    if len(x) < 3:
        return np.zeros(0, dtype=np.int64)
    mid = x[1:-1]
    cand = np.flatnonzero((mid > x[:-2]) & (mid > x[2:]) & (mid > np.median(x))) + 1
    min_dist = min_dist_s * sig.rate_hz
    kept: list[int] = []
    # stable sort keeps the earlier index first among equal heights
    for idx in cand[np.argsort(-x[cand], kind="stable")]:
        if all(abs(idx - k) >= min_dist - 1e-9 for k in kept):
            kept.append(int(idx))
    return np.array(sorted(kept), dtype=np.int64)


def hrv_metrics(peak_times_ms) -> HrvReport:
    """Time-domain and Poincare descriptors of inter-beat intervals.

    SDNN is the population standard deviation of the intervals.  SDSD is the
    root-mean-square of successive differences (the spread about zero, which
    is what the Poincare minor axis measures).  SD2's radicand is clamped at 0.
    """
    t = np.asarray(peak_times_ms, dtype=np.float64)
    if t.size < 3:
        raise TooFewPeaks(f"need >= 3 peaks, got {t.size}")
    nn = np.diff(t)
    sdnn = float(np.std(nn))
    sdsd = float(np.sqrt(np.mean(np.diff(nn) ** 2)))
    sd1 = math.sqrt(0.5) * sdsd
    radicand = 2.0 * sdnn**2 - 0.5 * sdsd**2
    clamped = radicand < 0
    sd2 = math.sqrt(max(radicand, 0.0))
    return HrvReport(sdnn, sdsd, sd1, sd2, math.pi * sd1 * sd2, clamped)


def resample_linear(sig: SampledSignal, new_rate_hz: float) -> SampledSignal:
    """Linear interpolation onto a new uniform grid starting at ``t0_ms``."""
    n = len(sig)
    if n < 2:
        raise SignalTooShort("resample_linear needs >= 2 samples")
    if new_rate_hz == sig.rate_hz:
        return SampledSignal(sig.samples.copy(), sig.rate_hz, sig.t0_ms)
    duration = (n - 1) / sig.rate_hz
    m = int(math.floor(duration * new_rate_hz + 1e-9)) + 1
    t_old = np.arange(n) / sig.rate_hz
    t_new = np.arange(m) / new_rate_hz
    return SampledSignal(np.interp(t_new, t_old, sig.samples), new_rate_hz, sig.t0_ms)


def zscore(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    if not sd > 0:
        raise NoPulse("constant signal")
    return (x - x.mean()) / sd
