"""Synthetic dual-view recordings with known ground truth.

Intensities (baselines, pulse amplitude, noise, drift, artifact magnitudes) are
expressed on the [0, 1] pixel scale and converted to bytes on write.  The pulse
morphology (fundamental + one harmonic) is adequate for HR-level validation and
is not meant to be physiological.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InvalidConfig
from .ingest import (
    BOXES_FILE,
    FACE_FILE,
    FINGER_FILE,
    LABEL_FILES,
    FrameTensor,
    RecordingLayout,
    write_csv,
    write_frame_tensor,
)
from .signalcore import SampledSignal

FACE_WEIGHTS = (0.3, 1.0, 0.5)
FINGER_WEIGHTS = (1.0, 0.6, 0.2)
HARMONIC_REL = 0.25
HARMONIC_PHASE = math.pi / 3
DEFAULT_T0_MS = 1_736_908_212_000
ARTIFACT_KINDS = ("dropout", "illumination_step", "additive_noise", "saturation")


@dataclass(frozen=True)
class SynthConfig:
    hr_bpm: float = 72.0
    duration_s: float = 16.0
    fps: float = 30.0
    face_amplitude: float = 0.02
    finger_amplitude: float = 0.06
    face_baseline: tuple = (0.62, 0.45, 0.38)
    finger_baseline: tuple = (0.75, 0.12, 0.06)
    background: tuple = (0.2, 0.22, 0.25)
    noise_sd: float = 0.01
    drift: float = 0.0
    texture_sd: float = 0.02
    frame_size: int = 32
    seed: int = 0
    t0_ms: int = DEFAULT_T0_MS

    def validate(self) -> None:
        if not 30.0 <= self.hr_bpm <= 180.0:
            raise InvalidConfig(f"hr_bpm {self.hr_bpm} outside 30-180")
        if not (self.fps > 0 and self.duration_s > 0):
            raise InvalidConfig("fps and duration_s must be positive")
        if self.duration_s * self.fps < 160:
            raise InvalidConfig("recording must hold at least 160 frames")
        if self.frame_size < 4 or self.noise_sd < 0:
            raise InvalidConfig("frame_size >= 4 and noise_sd >= 0 required")


@dataclass(frozen=True)
class ArtifactSpec:
    kind: str
    start_s: float
    len_s: float
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in ARTIFACT_KINDS:
            raise InvalidConfig(f"unknown artifact kind {self.kind!r}")


def _pulse_shape(phase: np.ndarray) -> np.ndarray:
    return np.sin(phase) + HARMONIC_REL * np.sin(2 * phase + HARMONIC_PHASE)


_grid = _pulse_shape(np.linspace(0, 2 * np.pi, 8192, endpoint=False))
_P2P = float(_grid.max() - _grid.min())


def ppg_at(cfg: SynthConfig, t_s: np.ndarray) -> np.ndarray:
    """Zero-mean, unit peak-to-peak pulse evaluated at times ``t_s`` (seconds)."""
    phase0 = np.random.default_rng(cfg.seed).uniform(0, 2 * np.pi)
    return _pulse_shape(2 * np.pi * cfg.hr_bpm / 60.0 * np.asarray(t_s) + phase0) / _P2P


def gen_ppg(cfg: SynthConfig, rate_hz: float | None = None) -> SampledSignal:
    cfg.validate()
    rate = rate_hz or cfg.fps
    n = int(round(cfg.duration_s * rate))
    return SampledSignal(ppg_at(cfg, np.arange(n) / rate), rate, cfg.t0_ms)


def frame_times_ms(cfg: SynthConfig) -> np.ndarray:
    n = int(round(cfg.duration_s * cfg.fps))
    return cfg.t0_ms + np.round(np.arange(n) * 1000.0 / cfg.fps).astype(np.int64)


def face_box(cfg: SynthConfig) -> tuple[int, int, int, int]:
    s = cfg.frame_size
    return (s // 4, s // 4, s // 2, s // 2)


def _render(cfg, ts_ms, baseline, amplitude, weights, rng, box=None) -> np.ndarray:
    """Float frames: baseline + texture + pulse * weights + drift + noise.

    With ``box`` the skin occupies only that (x, y, w, h) region and the rest is
    a pulse-free background.
    """
    t = (ts_ms - cfg.t0_ms) / 1000.0
    s = cfg.frame_size
    skin = np.asarray(baseline)[None, None, :] + rng.normal(0, cfg.texture_sd, size=(s, s, 1))
    pulse = amplitude * ppg_at(cfg, t)[:, None, None, None] * np.asarray(weights)
    if box is None:
        frames = skin + pulse
    else:
        x, y, w, h = box
        frames = np.empty((len(t), s, s, 3))
        frames[:] = np.asarray(cfg.background)
        frames[:, y : y + h, x : x + w] = skin[y : y + h, x : x + w] + pulse
    frames += cfg.drift * t[:, None, None, None]
    if cfg.noise_sd > 0:
        frames += rng.normal(0, cfg.noise_sd, size=frames.shape)
    return frames


def _apply_artifacts(frames, ts_ms, cfg, artifacts, rng) -> None:
    t = (ts_ms - cfg.t0_ms) / 1000.0
    for a in artifacts:
        if a.start_s < 0 or a.start_s + a.len_s > cfg.duration_s + 1e-9:
            raise InvalidConfig(f"artifact window {a} outside the recording")
        sel = (t >= a.start_s) & (t < a.start_s + a.len_s)
        if a.kind == "dropout":
            frames[sel] = a.magnitude
        elif a.kind == "illumination_step":
            frames[sel] += a.magnitude
        elif a.kind == "additive_noise":
            frames[sel] += rng.normal(0, a.magnitude, size=frames[sel].shape)
        elif a.kind == "saturation":
            frames[sel] *= 1.0 + a.magnitude


def _to_bytes(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.round(frames * 255.0), 0, 255).astype(np.uint8)


def gen_dual_view(
    cfg: SynthConfig,
    artifacts: dict[str, list[ArtifactSpec]] | None = None,
    out_dir=None,
    subject_id: str = "001",
) -> tuple[FrameTensor, FrameTensor, RecordingLayout | None]:
    """Render both views; when ``out_dir`` is given, write the full on-disk layout."""
    cfg.validate()
    artifacts = artifacts or {}
    unknown = set(artifacts) - {"face", "finger"}
    if unknown:
        raise InvalidConfig(f"artifact views must be 'face' or 'finger', got {unknown}")
    rng = np.random.default_rng([cfg.seed, 1])
    ts = frame_times_ms(cfg)
    box = face_box(cfg)
    face = _render(cfg, ts, cfg.face_baseline, cfg.face_amplitude, FACE_WEIGHTS, rng, box)
    finger = _render(cfg, ts, cfg.finger_baseline, cfg.finger_amplitude, FINGER_WEIGHTS, rng)
    _apply_artifacts(face, ts, cfg, artifacts.get("face", []), rng)
    _apply_artifacts(finger, ts, cfg, artifacts.get("finger", []), rng)
    face_t = FrameTensor(_to_bytes(face), ts)
    finger_t = FrameTensor(_to_bytes(finger), ts.copy())
    layout = None
    if out_dir is not None:
        layout = write_recording(cfg, face_t, finger_t, Path(out_dir), subject_id)
    return face_t, finger_t, layout


def write_recording(cfg, face: FrameTensor, finger: FrameTensor, out_dir: Path, subject_id: str):
    session = out_dir / subject_id / "session"
    labels = out_dir / subject_id / "v01"
    write_frame_tensor(session / FACE_FILE, face)
    write_frame_tensor(session / FINGER_FILE, finger)
    box = face_box(cfg)
    write_csv(
        session / BOXES_FILE,
        ("frame_index", "x", "y", "w", "h"),
        [(i, *box) for i in range(face.n_frames)],
    )

    t_end = int(face.timestamps_ms[-1])
    bvp_t = cfg.t0_ms + np.arange(0, t_end - cfg.t0_ms + 50 + 1, 50)
    bvp = ppg_at(cfg, (bvp_t - cfg.t0_ms) / 1000.0)
    sec_t = cfg.t0_ms + np.arange(0, t_end - cfg.t0_ms + 1, 1000)
    rr_t = cfg.t0_ms + np.arange(0, t_end - cfg.t0_ms + 1, 20)
    rr = np.sin(2 * np.pi * 0.25 * (rr_t - cfg.t0_ms) / 1000.0)

    def emit(key, rows):
        name, header = LABEL_FILES[key]
        write_csv(labels / name, header, rows)

    emit("bvp", [(int(t), repr(float(v))) for t, v in zip(bvp_t, bvp)])
    emit("hr", [(int(t), cfg.hr_bpm) for t in sec_t])
    emit("spo2", [(int(t), 98.0) for t in sec_t])
    emit("rr", [(int(t), repr(float(v))) for t, v in zip(rr_t, rr)])
    emit("frames", [(i, int(t)) for i, t in enumerate(face.timestamps_ms)])
    return RecordingLayout(subject_id, session / FACE_FILE, session / FINGER_FILE, labels, session / BOXES_FILE)


def gen_dataset(
    base: SynthConfig,
    hrs,
    out_dir,
    artifacts: list[dict] | None = None,
) -> list[RecordingLayout]:
    """One recording per HR value, subject ids 001, 002, ..., seeds base.seed + i."""
    layouts = []
    for i, hr in enumerate(hrs):
        cfg = replace(base, hr_bpm=float(hr), seed=base.seed + i)
        arts = artifacts[i] if artifacts else None
        _, _, layout = gen_dual_view(cfg, arts, out_dir, subject_id=f"{i + 1:03d}")
        layouts.append(layout)
    return layouts
