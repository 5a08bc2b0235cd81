"""Run reports: per-chunk HR pairs, aggregate metrics and their CSV form.

CSV layout::

    subject,chunk,est_bpm,ref_bpm
    001,0,72.10546875,72.0
    ...
    # method = pos
    # mae_bpm = 0.21...

Floats are written with ``repr`` so a reload reproduces them bit for bit, and
every save re-derives the metrics from the pairs it is about to write.
"""

from __future__ import annotations

import io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import EmptyInput, PulseFuseError
from ..ingest import atomic_write_bytes
from ..signalcore import BlandAltman, MetricsReport, bland_altman, hr_metrics

HEADER = ("subject", "chunk", "est_bpm", "ref_bpm")
METRIC_KEYS = ("mae_bpm", "mape_pct", "rmse_bpm", "pearson_r", "n")
BA_KEYS = ("bias_bpm", "loa_lo_bpm", "loa_hi_bpm", "within_pct")


class ReportMismatch(PulseFuseError):
    """Stored summary does not match the metrics recomputed from the pairs."""


@dataclass
class RunReport:
    method: str
    pairs: list[tuple[str, int, float, float]] = field(default_factory=list)
    skipped: Counter = field(default_factory=Counter)
    config_hash: str = ""
    info: dict = field(default_factory=dict)
    metrics: MetricsReport | None = None
    ba: BlandAltman | None = None

    @property
    def est(self) -> np.ndarray:
        return np.array([p[2] for p in self.pairs], dtype=np.float64)

    @property
    def ref(self) -> np.ndarray:
        return np.array([p[3] for p in self.pairs], dtype=np.float64)

    @property
    def n_total(self) -> int:
        return len(self.pairs) + sum(self.skipped.values())

    def finalize(self) -> "RunReport":
        """(Re)compute metrics from the pairs; empty reports get ``metrics=None``."""
        self.metrics = hr_metrics(self.est, self.ref) if self.pairs else None
        try:
            self.ba = bland_altman(self.est, self.ref) if len(self.pairs) >= 2 else None
        except EmptyInput:
            self.ba = None
        return self

    @property
    def empty(self) -> bool:
        return not self.pairs


def _metrics_equal(a, b) -> bool:
    if (a is None) != (b is None):
        return False
    if a is None:
        return True
    for x, y in zip(vars(a).values(), vars(b).values()):
        if isinstance(x, float) and math.isnan(x):
            if not (isinstance(y, float) and math.isnan(y)):
                return False
        elif x != y:
            return False
    return True


def check_report(rep: RunReport) -> None:
    fresh = RunReport(rep.method, list(rep.pairs)).finalize()
    if not (_metrics_equal(rep.metrics, fresh.metrics) and _metrics_equal(rep.ba, fresh.ba)):
        raise ReportMismatch(f"stored metrics {rep.metrics} differ from recomputed {fresh.metrics}")


def report_to_text(rep: RunReport) -> str:
    buf = io.StringIO()
    buf.write(",".join(HEADER) + "\n")
    for subject, chunk, est, ref in rep.pairs:
        buf.write(f"{subject},{int(chunk)},{float(est)!r},{float(ref)!r}\n")
    buf.write(f"# method = {rep.method}\n")
    buf.write(f"# config_hash = {rep.config_hash}\n")
    buf.write(f"# n_chunks = {rep.n_total}\n")
    buf.write(f"# n_skipped = {sum(rep.skipped.values())}\n")
    for reason, count in sorted(rep.skipped.items()):
        buf.write(f"# skipped.{reason} = {count}\n")
    for k, v in sorted(rep.info.items()):
        buf.write(f"# info.{k} = {v}\n")
    if rep.metrics is None:
        buf.write("# metrics = empty\n")
    else:
        for k in METRIC_KEYS:
            buf.write(f"# {k} = {getattr(rep.metrics, k)!r}\n")
    if rep.ba is not None:
        for k in BA_KEYS:
            buf.write(f"# ba.{k} = {getattr(rep.ba, k)!r}\n")
    return buf.getvalue()


def save_report(path, rep: RunReport) -> None:
    rep.finalize()
    text = report_to_text(rep)
    check_report(parse_report(text))
    atomic_write_bytes(Path(path), text.encode())


def _num(text: str):
    text = text.strip()
    if text in ("nan", "inf", "-inf"):
        return float(text)
    try:
        return int(text)
    except ValueError:
        return float(text)


def parse_report(text: str) -> RunReport:
    lines = text.splitlines()
    if not lines or tuple(lines[0].split(",")) != HEADER:
        raise ValueError(f"report header must be {','.join(HEADER)}")
    rep = RunReport(method="")
    summary = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition("=")
            summary[key.strip()] = val.strip()
            continue
        subject, chunk, est, ref = line.split(",")
        rep.pairs.append((subject, int(chunk), float(est), float(ref)))
    rep.method = summary.get("method", "")
    rep.config_hash = summary.get("config_hash", "")
    rep.skipped = Counter({k[8:]: int(v) for k, v in summary.items() if k.startswith("skipped.")})
    rep.info = {k[5:]: v for k, v in summary.items() if k.startswith("info.")}
    if all(k in summary for k in METRIC_KEYS):
        rep.metrics = MetricsReport(*(_num(summary[k]) for k in METRIC_KEYS))
    if all(f"ba.{k}" in summary for k in BA_KEYS):
        rep.ba = BlandAltman(*(_num(summary[f"ba.{k}"]) for k in BA_KEYS))
    return rep


def load_report(path, check: bool = True) -> RunReport:
    rep = parse_report(Path(path).read_text())
    if check:
        check_report(rep)
    return rep


def bland_altman_rows(rep: RunReport) -> str:
    """CSV of per-pair mean/difference points plus the agreement summary."""
    buf = io.StringIO()
    buf.write("subject,chunk,mean_bpm,diff_bpm\n")
    for subject, chunk, est, ref in rep.pairs:
        buf.write(f"{subject},{chunk},{(est + ref) / 2.0!r},{est - ref!r}\n")
    ba = bland_altman(rep.est, rep.ref)
    for k in BA_KEYS:
        buf.write(f"# {k} = {getattr(ba, k)!r}\n")
    return buf.getvalue()
