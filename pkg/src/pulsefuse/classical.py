"""Unsupervised rPPG extractors (GREEN, POS, ICA, OMIT) on spatial-mean RGB traces.

Each extractor returns a z-scored :class:`SampledSignal`; HR is read out by the
shared ``bandpass -> welch_psd -> estimate_hr`` chain in :mod:`signalcore`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyRoi, IcaNoConvergence, NoPulse, RankDeficient, SignalTooShort
from .ingest import FrameTensor
from .signalcore import DEFAULT_BAND, BandLimits, SampledSignal, bandpass, welch_psd, zscore

MIN_TRACE_LEN = 32
POS_WINDOW_S = 1.6
ICA_MAX_ITER = 200
ICA_TOL = 1e-6
ICA_MAX_COND = 1e8
ICA_STROKE_REL = 0.1
ICA_MIN_STEP = 1.0 / 16
OMIT_MIN_ENERGY = 1e-9


@dataclass(frozen=True)
class RgbTrace:
    r: np.ndarray
    g: np.ndarray
    b: np.ndarray
    rate_hz: float

    def __post_init__(self):
        for name in "rgb":
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not (len(self.r) == len(self.g) == len(self.b)):
            raise ValueError("channel traces must have equal lengths")
        if len(self.r) < MIN_TRACE_LEN:
            raise SignalTooShort(f"trace needs >= {MIN_TRACE_LEN} samples")
        if not np.all(np.isfinite(self.matrix())):
            raise ValueError("trace contains non-finite values")

    def matrix(self) -> np.ndarray:
        """3 x N array of the r, g, b rows."""
        return np.vstack([self.r, self.g, self.b])

    def scaled(self, gain: float) -> "RgbTrace":
        return RgbTrace(self.r * gain, self.g * gain, self.b * gain, self.rate_hz)

    @classmethod
    def from_matrix(cls, m: np.ndarray, rate_hz: float) -> "RgbTrace":
        return cls(m[0], m[1], m[2], rate_hz)


def spatial_mean_trace(frames: FrameTensor, roi=None, rate_hz: float | None = None) -> RgbTrace:
    """Per-frame channel means over ``roi`` = (x, y, w, h), scaled to [0, 1]."""
    px = frames.pixels
    if roi is not None:
        x, y, w, h = (int(v) for v in roi)
        px = px[:, max(y, 0) : y + h, max(x, 0) : x + w]
        if w <= 0 or h <= 0 or px.shape[1] == 0 or px.shape[2] == 0:
            raise EmptyRoi(f"roi {roi} selects no pixels")
    means = px.reshape(px.shape[0], -1, px.shape[-1]).mean(axis=1) / 255.0
    if rate_hz is None:
        ts = frames.timestamps_ms
        rate_hz = 1000.0 * (len(ts) - 1) / float(ts[-1] - ts[0])
    return RgbTrace(means[:, 0], means[:, 1], means[:, 2], rate_hz)


def inband_power(x: np.ndarray, rate_hz: float, band: BandLimits = DEFAULT_BAND) -> tuple[float, float]:
    """(in-band power, total power) of ``x`` from its Welch spectrum."""
    spec = welch_psd(SampledSignal(x, rate_hz))
    mask = (spec.freqs_hz >= band.lo_hz) & (spec.freqs_hz <= band.hi_hz)
    return float(spec.power[mask].sum()), float(spec.power.sum())


def green(trace: RgbTrace, channel: str = "g") -> SampledSignal:
    """Z-scored green channel; ``channel='r'`` substitutes red (fingertip option)."""
    return SampledSignal(zscore(getattr(trace, channel)), trace.rate_hz)


def pos_raw(trace: RgbTrace) -> np.ndarray:
    """Overlap-added POS signal before z-scoring (stride-1 windows of 1.6 s)."""
    c = trace.matrix()
    n = c.shape[1]
    win = int(round(POS_WINDOW_S * trace.rate_hz))
    if n < win:
        raise SignalTooShort(f"POS needs >= {win} samples, got {n}")
    windows = np.lib.stride_tricks.sliding_window_view(c, win, axis=1)  # 3 x (n-win+1) x win
    mu = windows.mean(axis=2, keepdims=True)
    if np.any(mu == 0):
        raise NoPulse("a colour channel has zero mean inside a POS window")
    cn = windows / mu
    s1 = cn[1] - cn[2]
    s2 = -2.0 * cn[0] + cn[1] + cn[2]
    sd1 = s1.std(axis=1, keepdims=True)
    sd2 = s2.std(axis=1, keepdims=True)
    alpha = np.divide(sd1, sd2, out=np.zeros_like(sd1), where=sd2 > 0)
    h = s1 + alpha * s2
    h -= h.mean(axis=1, keepdims=True)
    out = np.zeros(n)
    for k in range(win):
        out[k : k + h.shape[0]] += h[:, k]
    return out


def pos(trace: RgbTrace) -> SampledSignal:
    """Plane-orthogonal-to-skin projection.

    The output is rounded to single precision.  Per-window mean normalisation
    makes the waveform gain invariant only up to float64 rounding (~1e-15);
    rounding to float32 (still far finer than 8-bit pixel data) makes the
    result bit-identical under a global gain.
    """
    z = zscore(pos_raw(trace))
    return SampledSignal(z.astype(np.float32).astype(np.float64), trace.rate_hz)


def _whiten(x: np.ndarray) -> np.ndarray:
    z = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
    cov = z @ z.T / z.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] <= 0 or evals[-1] / evals[0] >= ICA_MAX_COND:
        raise RankDeficient(f"channel covariance is ill-conditioned (eigenvalues {evals})")
    return (evecs / np.sqrt(evals)).T @ z


def _sym_decorrelate(w: np.ndarray) -> np.ndarray:
    s, u = np.linalg.eigh(w @ w.T)
    return (u / np.sqrt(s)) @ u.T @ w


def _rotation_change(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.abs(np.einsum("ij,ij->i", a, b)) - 1.0)))


def fastica(x: np.ndarray, max_iter: int = ICA_MAX_ITER, tol: float = ICA_TOL) -> np.ndarray:
    """Symmetric fixed-point ICA with a tanh contrast, identity initial rotation.

    Returns the source estimates, one per row.  When the iteration falls into
    the period-2 oscillation typical of sub-Gaussian sources (the new rotation
    matches the one from two steps back) the step is halved, as in the
    stabilised fixed-point scheme; it is halved again after every further
    quarter of the iteration budget.
    """
    if np.any(x.std(axis=1) == 0):
        raise RankDeficient("a channel is constant")
    z = _whiten(x)
    n = z.shape[1]
    w = np.eye(z.shape[0])
    w_prev = w
    step = 1.0
    for it in range(max_iter):
        g = np.tanh(w @ z)
        w_fp = g @ z.T / n - np.mean(1.0 - g**2, axis=1)[:, None] * w
        w_new = _sym_decorrelate(w_fp)
        if step < 1.0:
            # align row signs before blending; tanh updates may flip them
            w_new *= np.sign(np.einsum("ij,ij->i", w_new, w))[:, None]
            w_new = _sym_decorrelate(w + step * (w_new - w))
        change = _rotation_change(w_new, w)
        # oscillation: back near the rotation of two steps ago, far from the last one
        stroke = change >= tol and _rotation_change(w_new, w_prev) < ICA_STROKE_REL * change
        if step > ICA_MIN_STEP and (stroke or (it + 1) % (max_iter // 4) == 0):
            step *= 0.5
        w_prev, w = w, w_new
        if change < tol:
            return w @ z
    raise IcaNoConvergence(f"FastICA did not converge in {max_iter} iterations")


def _orient(x: np.ndarray, rate_hz: float) -> np.ndarray:
    """Flip so the largest excursion of the band-passed component is positive."""
    y = bandpass(SampledSignal(x, rate_hz)).samples
    return x if y[np.argmax(np.abs(y))] >= 0 else -x


def _best_inband(components: np.ndarray, rate_hz: float) -> np.ndarray:
    fractions = []
    for c in components:
        inb, tot = inband_power(c, rate_hz)
        fractions.append(inb / tot if tot > 0 else 0.0)
    return components[int(np.argmax(fractions))]


def ica_poh(trace: RgbTrace) -> SampledSignal:
    sources = fastica(trace.matrix())
    best = _best_inband(sources, trace.rate_hz)
    return SampledSignal(zscore(_orient(best, trace.rate_hz)), trace.rate_hz)


def householder_complement(q: np.ndarray) -> np.ndarray:
    """3 x 2 orthonormal basis of the plane orthogonal to unit vector ``q``.

    The reflection H = I - 2 v v^T / (v^T v) with v = q - e1 (or q + e1) maps q
    to -/+ e1; its remaining two columns span the complement.
    """
    e1 = np.zeros_like(q)
    e1[0] = 1.0
    v = q + np.sign(q[0] if q[0] != 0 else 1.0) * e1
    h = np.eye(len(q)) - 2.0 * np.outer(v, v) / (v @ v)
    return h[:, 1:]


def omit_projector(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean-colour direction q and projector P = I - q q^T for a 3 x N trace."""
    m = x.mean(axis=1)
    norm = np.linalg.norm(m)
    if norm == 0:
        raise NoPulse("trace has zero mean colour")
    q = m / norm
    return q, np.eye(3) - np.outer(q, q)


def omit(trace: RgbTrace) -> SampledSignal:
    """Project out the mean skin colour and keep the more pulsatile residual axis."""
    x = trace.matrix()
    q, p = omit_projector(x)
    residual = p @ x
    if float(np.sum(residual**2)) < OMIT_MIN_ENERGY * float(np.sum(x**2)):
        raise NoPulse("trace lies along its mean colour; nothing left after projection")
    components = householder_complement(q).T @ residual
    components = components[[c.std() > 0 for c in components]]
    if len(components) == 0:
        raise NoPulse("projected components are constant")
    best = _best_inband(components, trace.rate_hz)
    return SampledSignal(zscore(best), trace.rate_hz)


METHODS = {"green": green, "pos": pos, "ica": ica_poh, "omit": omit}
