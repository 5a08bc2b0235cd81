from dataclasses import replace

import numpy as np
import pytest

from pulsefuse.errors import InvalidConfig
from pulsefuse.harness.config import SynthSettings
from pulsefuse.harness.datasets import artifact_plan, base_config, corrupt_chunks, draw_hrs
from pulsefuse.signalcore import hr_from_waveform
from pulsefuse.synth import ArtifactSpec, face_box, frame_times_ms, gen_dual_view, gen_ppg, ppg_at


def test_ppg_unit_peak_to_peak_and_rate(synth_cfg):
    sig = gen_ppg(synth_cfg)
    assert sig.rate_hz == synth_cfg.fps
    assert len(sig.samples) == 240
    fine = ppg_at(synth_cfg, np.linspace(0, 60 / synth_cfg.hr_bpm, 20001))
    assert fine.max() - fine.min() == pytest.approx(1.0, abs=1e-6)
    assert abs(hr_from_waveform(sig) - synth_cfg.hr_bpm) < 0.5


@pytest.mark.parametrize("hr", [50.0, 77.0, 120.0, 150.0])
def test_ppg_hr_recovered(synth_cfg, hr):
    assert abs(hr_from_waveform(gen_ppg(replace(synth_cfg, hr_bpm=hr, duration_s=16))) - hr) < 0.5


def test_deterministic_given_seed(synth_cfg):
    a = gen_dual_view(synth_cfg)
    b = gen_dual_view(synth_cfg)
    c = gen_dual_view(replace(synth_cfg, seed=6))
    assert np.array_equal(a[0].pixels, b[0].pixels) and np.array_equal(a[1].pixels, b[1].pixels)
    assert not np.array_equal(a[0].pixels, c[0].pixels)


def test_frames_and_face_box(synth_cfg):
    face, finger, layout = gen_dual_view(synth_cfg)
    assert layout is None
    assert face.pixels.shape == (240, 16, 16, 3) and finger.pixels.shape == (240, 16, 16, 3)
    assert np.array_equal(face.timestamps_ms, frame_times_ms(synth_cfg))
    x, y, w, h = face_box(synth_cfg)
    outside = face.pixels[:, 0, 0].astype(float)
    inside = face.pixels[:, y + h // 2, x + w // 2].astype(float)
    # background carries no pulse: its temporal spread is noise only
    assert outside.std(axis=0).max() < inside.std(axis=0).max()


def test_artifacts_applied(synth_cfg):
    clean = gen_dual_view(replace(synth_cfg, noise_sd=0))[0].pixels
    arts = {"face": [ArtifactSpec("dropout", 1.0, 1.0, 0.5)]}
    dirty = gen_dual_view(replace(synth_cfg, noise_sd=0), arts)[0].pixels
    t = (frame_times_ms(synth_cfg) - synth_cfg.t0_ms) / 1000.0
    sel = (t >= 1.0) & (t < 2.0)
    assert np.all(dirty[sel] == round(0.5 * 255))
    assert np.array_equal(dirty[~sel], clean[~sel])


def test_invalid_configs(synth_cfg):
    with pytest.raises(InvalidConfig):
        gen_ppg(replace(synth_cfg, hr_bpm=200))
    with pytest.raises(InvalidConfig):
        gen_ppg(replace(synth_cfg, duration_s=5))
    with pytest.raises(InvalidConfig):
        ArtifactSpec("smudge", 0, 1)
    with pytest.raises(InvalidConfig):
        gen_dual_view(synth_cfg, {"face": [ArtifactSpec("dropout", 7.5, 1.0)]})
    with pytest.raises(InvalidConfig):
        gen_dual_view(synth_cfg, {"ear": []})


def test_dataset_plans():
    s = SynthSettings(n_recordings=4)
    hrs = draw_hrs(s, 0)
    assert np.all((hrs >= 50) & (hrs <= 150))
    assert np.array_equal(hrs, draw_hrs(s, 0))
    cfg = base_config(s, 0)
    arts = corrupt_chunks(cfg)
    assert len(arts) == 2 * 3
    plan = artifact_plan(replace(s, artifacts="one_view"), cfg)
    assert [list(p) for p in plan] == [["face"], ["finger"], ["face"], ["finger"]]
    assert artifact_plan(s, cfg) is None
    with pytest.raises(InvalidConfig):
        artifact_plan(replace(s, artifacts="bogus"), cfg)
