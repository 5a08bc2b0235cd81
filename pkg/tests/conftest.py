from dataclasses import replace

import numpy as np
import pytest

from pulsefuse.harness.config import SynthSettings
from pulsefuse.harness.datasets import make_dataset
from pulsefuse.synth import SynthConfig


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Four clean 16 s recordings at 16x16 px; returns (root, injected HRs)."""
    root = tmp_path_factory.mktemp("synth")
    s = SynthSettings(n_recordings=4, frame_size=16)
    layouts = make_dataset(s, root, seed=3)
    hrs = [float(np.loadtxt(l.label_dir / "HR.csv", delimiter=",", skiprows=1)[0, 1]) for l in layouts]
    return root, hrs


@pytest.fixture
def synth_cfg():
    return SynthConfig(hr_bpm=84.0, duration_s=8.0, frame_size=16, seed=5)


def with_hr(cfg, hr):
    return replace(cfg, hr_bpm=hr)
