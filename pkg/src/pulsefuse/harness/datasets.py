"""Synthetic datasets described by :class:`SynthSettings`."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..errors import InvalidConfig
from ..ingest import CHUNK_LEN
from ..synth import ArtifactSpec, SynthConfig, gen_dataset
from .config import SynthSettings

DROPOUT_FRACTION = 0.8
DROPOUT_LEVEL = 0.5
STEP_MAGNITUDE = 0.15


def base_config(s: SynthSettings, seed: int) -> SynthConfig:
    return SynthConfig(
        duration_s=s.duration_s,
        fps=s.fps,
        frame_size=s.frame_size,
        noise_sd=s.noise_sd,
        face_amplitude=s.face_amplitude,
        finger_amplitude=s.finger_amplitude,
        seed=seed,
    )


def draw_hrs(s: SynthSettings, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 7]).uniform(s.hr_min, s.hr_max, s.n_recordings)


def corrupt_chunks(cfg: SynthConfig) -> list[ArtifactSpec]:
    """Per 160-frame chunk: a constant-frame dropout over the middle 80%, an illumination step after it."""
    chunk_s = CHUNK_LEN / cfg.fps
    n_chunks = int(cfg.duration_s * cfg.fps) // CHUNK_LEN
    arts = []
    for k in range(n_chunks):
        start = k * chunk_s
        lead = (1.0 - DROPOUT_FRACTION) / 2 * chunk_s
        arts.append(ArtifactSpec("dropout", start + lead, DROPOUT_FRACTION * chunk_s, DROPOUT_LEVEL))
        arts.append(ArtifactSpec("illumination_step", start + lead + DROPOUT_FRACTION * chunk_s, lead * 0.9,
                                 STEP_MAGNITUDE))
    return arts


def artifact_plan(s: SynthSettings, cfg: SynthConfig) -> list[dict] | None:
    """``face_dropout``: face corrupted everywhere; ``one_view``: face on even recordings, finger on odd."""
    if s.artifacts == "none":
        return None
    arts = corrupt_chunks(cfg)
    if s.artifacts == "face_dropout":
        return [{"face": arts} for _ in range(s.n_recordings)]
    if s.artifacts == "one_view":
        return [{("face" if i % 2 == 0 else "finger"): arts} for i in range(s.n_recordings)]
    raise InvalidConfig(f"unknown artifact plan {s.artifacts!r}")


def make_dataset(s: SynthSettings, out_dir, seed: int = 0):
    """Write ``s.n_recordings`` recordings with HRs uniform in [hr_min, hr_max]."""
    cfg = base_config(s, seed)
    return gen_dataset(cfg, draw_hrs(s, seed), out_dir, artifact_plan(s, cfg))


def with_artifacts(s: SynthSettings, plan: str) -> SynthSettings:
    return replace(s, artifacts=plan)
