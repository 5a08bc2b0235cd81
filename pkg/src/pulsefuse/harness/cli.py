"""``pulsefuse`` command line."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..errors import PulseFuseError
from ..fusion import F3Mamba, total_loss
from ..ingest import chunk_bounds, discover, load_recording
from ..nn.gradcheck import grad_check
from ..synth import gen_ppg
from .config import RunConfig, load_config
from .datasets import base_config, make_dataset
from .pipeline import evaluate_model, fold_chunks, load_chunks, load_model, load_recordings, run_classical, \
    split_folds, train_f3mamba
from .report import bland_altman_rows, load_report, save_report
from .summary import model_summary


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def cmd_synth(args) -> int:
    cfg = _config(args.config)
    layouts = make_dataset(cfg.synth, Path(args.out), cfg.seed)
    print(f"wrote {len(layouts)} recordings to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    layouts = discover(args.dir)
    if not layouts:
        print(f"no recordings found under {args.dir}", file=sys.stderr)
        return 1
    failures = 0
    for layout in layouts:
        try:
            rec = load_recording(layout)
            n = len(chunk_bounds(rec)) if args.check else 0
            print(f"{layout.subject_id}: {rec.face.n_frames} frames @ {rec.fps:.2f} fps, {n} chunks")
        except PulseFuseError as exc:
            failures += 1
            print(f"{layout.subject_id}: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1 if failures and args.check else 0


def _print_report(rep) -> None:
    m = rep.metrics
    if m is None:
        print(f"{rep.method}: no usable chunks ({dict(rep.skipped)})")
        return
    print(f"{rep.method}: n={m.n} skipped={sum(rep.skipped.values())} MAE={m.mae_bpm:.3f} "
          f"MAPE={m.mape_pct:.3f} RMSE={m.rmse_bpm:.3f} rho={m.pearson_r:.3f}")


def cmd_run(args) -> int:
    rep = run_classical(args.method, load_recordings(args.data), args.view, workers=args.workers)
    save_report(args.report, rep)
    _print_report(rep)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    chunks = load_chunks(args.data, cfg.chunk_size)
    train, val = chunks, None
    if cfg.train.fold >= 0:
        plan = split_folds(sorted({c.subject_id for c in chunks}), cfg.train.folds, cfg.seed)
        train, val = fold_chunks(chunks, plan, cfg.train.fold)
    res = train_f3mamba(cfg.train, cfg.model, train, val, out=args.out, config_text=cfg.to_text())
    for e, loss in enumerate(res.train_loss):
        extra = f" val_mae={res.val_mae[e]:.3f}" if res.val_mae else ""
        print(f"epoch {e}: loss={loss:.5f}{extra}")
    print(f"saved checkpoint (epoch {res.best_epoch}, {res.steps} steps) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = load_model(args.ckpt)
    chunks = load_chunks(args.data, cfg.chunk_size)
    if args.fold is not None:
        plan = split_folds(sorted({c.subject_id for c in chunks}), cfg.train.folds, cfg.seed)
        chunks = fold_chunks(chunks, plan, args.fold)[1]
    rep = evaluate_model(model, chunks, cfg.train.batch, args.mask, config_hash=cfg.digest())
    save_report(args.report, rep)
    _print_report(rep)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args.config)
    gc = cfg.gradcheck
    model = F3Mamba(cfg.model)
    rng = np.random.default_rng(cfg.seed)
    shape = (gc.batch, cfg.model.frames, cfg.model.input_size, cfg.model.input_size, 3)
    face, finger = rng.normal(size=shape), rng.normal(size=shape)
    synth = cfg.synth
    label = np.stack([np.diff(gen_ppg(_ppg_cfg(synth, cfg.seed + i)).samples[: cfg.model.frames + 1])
                      for i in range(gc.batch)])

    def f():
        return total_loss(model(face, finger, train=False), label, cfg.train.weights)

    rep = grad_check(f, model.store, eps=gc.eps, tol=gc.tol, coords_per_param=gc.coords_per_param, seed=cfg.seed,
                     skip_kinks=gc.skip_kinks)
    worst = sorted(rep.per_param.items(), key=lambda kv: -kv[1])[:5]
    for name, err in worst:
        print(f"{name}: {err:.3e}")
    print(f"{rep.n_coords} coordinates (max-pool switches: {rep.n_shrunk} probes shrunk, {rep.n_kinks} resampled, "
          f"{rep.n_kink_kept} kept), "
          f"max rel err {rep.max_err:.3e}, tol {rep.tol:g}: "
          f"{'PASS' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 1


def _ppg_cfg(s, seed):
    hr = float(np.random.default_rng(seed).uniform(s.hr_min, s.hr_max))
    return replace(base_config(s, seed), hr_bpm=hr)


def cmd_summary(args) -> int:
    cfg = _config(args.config)
    for line in model_summary(cfg.model).lines():
        print(line)
    return 0


def cmd_ba(args) -> int:
    text = bland_altman_rows(load_report(args.report))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    from .bench import fusion_benchmark

    seeds = tuple(range(args.seeds))
    print("variant,seed,mae_fused,mae_face_masked,mae_finger_masked,reduction_pct")
    for r in fusion_benchmark(variants=tuple(args.variants.split(",")), seeds=seeds):
        print(f"{r.variant},{r.seed},{r.mae_fused:.4f},{r.mae_face_masked:.4f},{r.mae_finger_masked:.4f},"
              f"{r.reduction_pct:.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pulsefuse", description="Dual-view rPPG toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("ingest", help="load recordings and report their layout")
    s.add_argument("dir")
    s.add_argument("--check", action="store_true", help="also chunk; exit 1 on any failure")
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("run", help="classical baseline over a dataset")
    s.add_argument("--method", required=True, choices=["green", "ica", "pos", "omit"])
    s.add_argument("--view", default="face", choices=["face", "finger"])
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("train", help="train F3Mamba")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--mask", choices=["face", "finger"], help="zero one input view")
    s.add_argument("--fold", type=int, help="evaluate only this fold's subjects")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    s.add_argument("--config")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("summary", help="parameter count, FLOPs and storage")
    s.add_argument("--config")
    s.set_defaults(fn=cmd_summary)

    s = sub.add_parser("ba", help="Bland-Altman CSV from a report")
    s.add_argument("--report", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_ba)

    s = sub.add_parser("bench", help="one-corrupted-view fusion benchmark (slow)")
    s.add_argument("--variants", default="V2,V3,V4,V5")
    s.add_argument("--seeds", type=int, default=3)
    s.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except PulseFuseError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
