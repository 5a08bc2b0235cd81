"""Cross-validation folds, classical runs, F3Mamba training and evaluation."""

from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..classical import METHODS, spatial_mean_trace
from ..errors import (
    ConfigMismatch,
    EmptyInput,
    InvalidConfig,
    NonFiniteLoss,
    NonFiniteValue,
    PulseFuseError,
    TooFewSubjects,
)
from ..fusion import F3Mamba, F3MambaConfig, LossWeights, total_loss
from ..ingest import AlignedRecording, ChunkPair, chunk_bounds, discover, load_recording, make_chunks, \
    reference_hr, window_box
from ..nn import tensor as T
from ..nn.optim import Adam, OneCycle
from ..nn.params import load_checkpoint, save_checkpoint
from ..signalcore import SampledSignal, hr_from_waveform, pearson
from .config import RunConfig, TrainConfig, parse_config
from .report import RunReport

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple[tuple[str, ...], ...]

    def train_test(self, i: int) -> tuple[list[str], list[str]]:
        test = list(self.folds[i])
        train = [s for j, f in enumerate(self.folds) if j != i for s in f]
        return train, test


def split_folds(subjects, k: int = 3, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, then round-robin assignment to ``k`` folds."""
    subjects = list(dict.fromkeys(subjects))
    if len(subjects) < k:
        raise TooFewSubjects(f"{len(subjects)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(subjects))
    folds = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(subjects[idx])
    return FoldPlan(k, seed, tuple(tuple(f) for f in folds))


# ---------------------------------------------------------------------------
# data


def load_recordings(root) -> list[AlignedRecording]:
    layouts = discover(root)
    if not layouts:
        raise EmptyInput(f"no recordings under {root}")
    return [load_recording(l) for l in layouts]


def load_chunks(root, size: int) -> list[ChunkPair]:
    chunks = []
    for rec in load_recordings(root):
        chunks.extend(make_chunks(rec, size=size))
    return chunks


def _parallel_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# classical baselines


def run_classical(method: str, recordings, view: str = "face", workers: int = 1) -> RunReport:
    """Per chunk: spatial-mean trace -> method -> bandpass/Welch HR, paired with the reference.

    Chunks whose extraction raises a library error are skipped and counted by
    error name.
    """
    if method not in METHODS:
        raise InvalidConfig(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    if view not in ("face", "finger"):
        raise InvalidConfig(f"view must be face or finger, got {view!r}")
    jobs = []
    for rec in recordings:
        for k, (a, b) in enumerate(chunk_bounds(rec)):
            jobs.append((rec, k, a, b))

    def one(job):
        rec, k, a, b = job
        try:
            ref = reference_hr(rec, a, b)
            if view == "face":
                frames = rec.face.select(slice(a, b))
                roi = window_box(rec.boxes, a, b)
            else:
                frames = rec.finger.select(slice(a, b))
                roi = None
            trace = spatial_mean_trace(frames, roi, rate_hz=rec.fps)
            est = hr_from_waveform(METHODS[method](trace))
            return (rec.subject_id, k, est, ref), None
        except PulseFuseError as exc:
            return None, type(exc).__name__

    rep = RunReport(method=f"{method}:{view}")
    for pair, err in _parallel_map(one, jobs, workers):
        if err is not None:
            rep.skipped[err] += 1
        else:
            rep.pairs.append(pair)
    return rep.finalize()


# ---------------------------------------------------------------------------
# F3Mamba


def chunk_arrays(chunks: list[ChunkPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack chunks into channels-last (B, 160, S, S, 3) face/finger arrays and (B, 160) labels."""
    face = np.stack([c.face.transpose(0, 2, 3, 1) for c in chunks])
    finger = np.stack([c.finger.transpose(0, 2, 3, 1) for c in chunks])
    label = np.stack([c.label for c in chunks])
    return face, finger, label


@dataclass
class TrainResult:
    model: F3Mamba
    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    train_corr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    steps: int = 0
    stopped_early: bool = False


def _inputs(model: F3Mamba, face, finger, mask: str | None = None):
    if mask == "face":
        face = np.zeros_like(face)
    elif mask == "finger":
        finger = np.zeros_like(finger)
    elif mask is not None:
        raise InvalidConfig(f"mask must be face, finger or None, got {mask!r}")
    views = model.cfg.views
    return (face if views in ("both", "face") else None), (finger if views in ("both", "finger") else None)


def predict(model: F3Mamba, chunks, batch: int = 4, mask: str | None = None) -> np.ndarray:
    """Eval-mode waveforms, (n_chunks, 160)."""
    out = []
    for i in range(0, len(chunks), batch):
        face, finger, _ = chunk_arrays(chunks[i : i + batch])
        out.append(model(*_inputs(model, face, finger, mask), train=False).data)
    return np.concatenate(out, axis=0)


def train_corrs(model: F3Mamba, chunks, batch: int = 4) -> list[float]:
    pred = predict(model, chunks, batch)
    corrs = []
    for p, c in zip(pred, chunks):
        try:
            corrs.append(pearson(p, c.label))
        except PulseFuseError:
            corrs.append(float("nan"))
    return corrs


def train_f3mamba(cfg: TrainConfig, model_cfg: F3MambaConfig, train_chunks, val_chunks=None,
                  out=None, config_text: str = "", rate_hz: float = 30.0) -> TrainResult:
    """Seeded Adam + one-cycle training; keeps the best-validation parameters.

    The first ``np_warmup_epochs`` epochs optimise the NP term alone before
    switching to ``cfg.weights``.  Without validation chunks the final
    parameters are kept.  A non-finite
    loss or gradient aborts with :class:`NonFiniteLoss`.
    """
    cfg.validate()
    if not train_chunks:
        raise EmptyInput("no training chunks")
    model = F3Mamba(model_cfg)
    opt = Adam(model.store)
    per_epoch = math.ceil(len(train_chunks) / cfg.batch)
    total = cfg.epochs * per_epoch
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    sched = OneCycle(cfg.lr, total)
    result = TrainResult(model)
    best = math.inf
    best_state = None
    step = 0
    for epoch in range(cfg.epochs):
        weights = LossWeights(1.0, 0.0, 0.0) if epoch < cfg.np_warmup_epochs else cfg.weights
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_chunks))
        losses = []
        for i in range(0, len(order), cfg.batch):
            if step >= total:
                break
            face, finger, label = chunk_arrays([train_chunks[j] for j in order[i : i + cfg.batch]])
            try:
                pred = model(*_inputs(model, face, finger), train=True, step=step)
                loss = total_loss(pred, label, weights, rate_hz)
                model.store.zero_grad()
                T.backward(loss)
            except NonFiniteValue as exc:
                raise NonFiniteLoss(f"epoch {epoch} step {step}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value) or not all(np.all(np.isfinite(t.grad)) for t in model.store.tensors()):
                raise NonFiniteLoss(f"epoch {epoch} step {step}: loss {value}")
            opt.step(sched(step))
            losses.append(value)
            result.step_loss.append(value)
            step += 1
        result.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        if val_chunks:
            rep = evaluate_model(model, val_chunks, batch=cfg.batch)
            mae = rep.metrics.mae_bpm if rep.metrics else math.inf
            result.val_mae.append(mae)
            if mae < best:
                best, best_state, result.best_epoch = mae, model.store.state(), epoch
        log.info("epoch %d loss %.4f val_mae %s", epoch, result.train_loss[-1],
                 result.val_mae[-1] if result.val_mae else "-")
        if cfg.stop_train_corr > 0:
            result.train_corr = train_corrs(model, train_chunks, cfg.batch)
            if min(result.train_corr) > cfg.stop_train_corr:
                result.stopped_early = True
                break
        if step >= total:
            break
    result.steps = step
    if best_state is not None:
        model.store.load_state(best_state)
    else:
        result.best_epoch = len(result.train_loss) - 1
    if out is not None:
        save_checkpoint(out, model.store, config_text)
    return result


def load_model(ckpt) -> tuple[F3Mamba, RunConfig]:
    text, state = load_checkpoint(ckpt)
    cfg = parse_config(text)
    model = F3Mamba(cfg.model)
    model.store.load_state(state)
    return model, cfg


def evaluate_model(model, chunks, batch: int = 4, mask: str | None = None, rate_hz: float = 30.0,
                   config_hash: str = "") -> RunReport:
    """Eval-mode HR per chunk; ``mask`` zeroes one input view (single-view ablation).

    ``model`` is an :class:`F3Mamba` or a checkpoint path.
    """
    if not isinstance(model, F3Mamba):
        model, cfg = load_model(model)
        config_hash = config_hash or cfg.digest()
    if not chunks:
        raise ConfigMismatch("no chunks to evaluate")
    size = model.cfg.input_size
    if chunks[0].face.shape[-1] != size:
        raise ConfigMismatch(f"chunks are {chunks[0].face.shape[-1]} px, model expects {size}")
    pred = predict(model, chunks, batch, mask)
    rep = RunReport(method="f3mamba" + (f":mask_{mask}" if mask else ""), config_hash=config_hash)
    for p, c in zip(pred, chunks):
        if not math.isfinite(c.hr_ref_bpm):
            rep.skipped["NoReference"] += 1
            continue
        try:
            est = hr_from_waveform(SampledSignal(p, rate_hz))
        except PulseFuseError as exc:
            rep.skipped[type(exc).__name__] += 1
            continue
        rep.pairs.append((c.subject_id, c.index, est, c.hr_ref_bpm))
    return rep.finalize()


def fold_chunks(chunks, plan: FoldPlan, fold: int):
    train_ids, test_ids = plan.train_test(fold)
    train = [c for c in chunks if c.subject_id in set(train_ids)]
    test = [c for c in chunks if c.subject_id in set(test_ids)]
    return train, test


def skipped_total(rep: RunReport) -> int:
    return sum(Counter(rep.skipped).values())
