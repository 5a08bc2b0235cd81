"""Desk-scale fusion benchmark: one corrupted view per recording, masked-input ablations.

Training and test recordings are synthetic with the ``one_view`` artifact plan
(face corrupted on even recordings, fingertip on odd ones).  Each variant is
trained per seed and scored on the test set three ways: both inputs, face
masked and fingertip masked.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

from ..fusion import F3MambaConfig, variant_config
from .config import SynthSettings, TrainConfig
from .datasets import make_dataset
from .pipeline import evaluate_model, load_chunks, train_f3mamba

BENCH_MODEL = F3MambaConfig(channels=4, d_state=4, input_size=8)
BENCH_TRAIN = TrainConfig(epochs=15, batch=4, lr=3e-3, np_warmup_epochs=5)
BENCH_SYNTH = SynthSettings(n_recordings=12, artifacts="one_view")
TEST_RECORDINGS = 8
TRAIN_SEED, TEST_SEED = 11, 99


@dataclass(frozen=True)
class BenchResult:
    variant: str
    seed: int
    mae_fused: float
    mae_face_masked: float
    mae_finger_masked: float

    @property
    def best_single(self) -> float:
        return min(self.mae_face_masked, self.mae_finger_masked)

    @property
    def reduction_pct(self) -> float:
        """MAE reduction of the fused model relative to the better single input."""
        return 100.0 * (self.best_single - self.mae_fused) / self.best_single


def bench_chunks(root, synth: SynthSettings = BENCH_SYNTH, size: int = BENCH_MODEL.input_size):
    root = Path(root)
    make_dataset(synth, root / "train", seed=TRAIN_SEED)
    make_dataset(replace(synth, n_recordings=TEST_RECORDINGS), root / "test", seed=TEST_SEED)
    return load_chunks(root / "train", size), load_chunks(root / "test", size)


def run_variant(variant: str, seed: int, train_chunks, test_chunks, model: F3MambaConfig = BENCH_MODEL,
                train: TrainConfig = BENCH_TRAIN) -> BenchResult:
    cfg = replace(variant_config(model, variant), seed=seed)
    res = train_f3mamba(replace(train, seed=seed), cfg, train_chunks)
    maes = [evaluate_model(res.model, test_chunks, batch=train.batch, mask=m).metrics.mae_bpm
            for m in (None, "face", "finger")]
    return BenchResult(variant, seed, *maes)


def fusion_benchmark(variants=("V2", "V3", "V4", "V5"), seeds=(0, 1, 2), root=None) -> list[BenchResult]:
    with tempfile.TemporaryDirectory() as tmp:
        train, test = bench_chunks(root or tmp)
        return [run_variant(v, s, train, test) for s in seeds for v in variants]
