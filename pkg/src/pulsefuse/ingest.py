"""Reading M3PD-style recordings and cutting them into dual-view chunks.

On-disk layout of one subject (``<root>/<subject_id>/``)::

    session/front_camera.m3ft     face view frames
    session/back_camera.m3ft      fingertip view frames
    session/face_boxes.csv        optional per-frame crop boxes
    v01/BVP.csv, HR.csv, RR.csv, SpO2.csv, frames_timestamp.csv

M3FT is a raw little-endian frame container::

    "M3FT" | u32 version=1 | u32 T | u32 H | u32 W | u32 C | u8 dtype=0 | 3 reserved
    T*H*W*C pixel bytes, frame-major
    T x i64 timestamps in milliseconds
"""

from __future__ import annotations

import csv
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import (
    BadMagic,
    EmptyRoi,
    LabelGap,
    MissingLabelFile,
    NonMonotonicTimestamps,
    NoPulse,
    NoTemporalOverlap,
    RecordingTooShort,
    TooFewFrames,
    TruncatedFile,
)
from .signalcore import SampledSignal, hr_from_waveform

log = logging.getLogger(__name__)

MAGIC = b"M3FT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIB3x")
CHUNK_LEN = 160
CHUNK_SIZE = 128
LABEL_GAP_MS = 250.0
BVP_RATE_HZ = 20.0
RESP_RATE_HZ = 50.0

LABEL_FILES = {
    "bvp": ("BVP.csv", ("timestamp_ms", "value")),
    "hr": ("HR.csv", ("timestamp_ms", "bpm")),
    "rr": ("RR.csv", ("timestamp_ms", "value")),
    "spo2": ("SpO2.csv", ("timestamp_ms", "percent")),
    "frames": ("frames_timestamp.csv", ("frame_index", "timestamp_ms")),
}
FACE_FILE = "front_camera.m3ft"
FINGER_FILE = "back_camera.m3ft"
BOXES_FILE = "face_boxes.csv"


@dataclass(frozen=True)
class FrameTensor:
    pixels: np.ndarray  # (T, H, W, C) uint8
    timestamps_ms: np.ndarray  # (T,) int64

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be a T x H x W x C uint8 array")
        if len(self.timestamps_ms) != self.pixels.shape[0]:
            raise ValueError("one timestamp per frame required")
        if np.any(np.diff(self.timestamps_ms) <= 0):
            raise NonMonotonicTimestamps("frame timestamps must be strictly increasing")

    @property
    def n_frames(self) -> int:
        return self.pixels.shape[0]

    def select(self, idx) -> "FrameTensor":
        return FrameTensor(self.pixels[idx], self.timestamps_ms[idx])


@dataclass(frozen=True)
class RecordingLayout:
    subject_id: str
    face_path: Path
    finger_path: Path
    label_dir: Path
    boxes_path: Path | None = None


@dataclass(frozen=True)
class AlignedRecording:
    subject_id: str
    face: FrameTensor
    finger: FrameTensor
    bvp: SampledSignal
    hr: np.ndarray  # (n, 2): t_ms, bpm
    spo2: np.ndarray  # (n, 2): t_ms, percent
    resp: SampledSignal | None = None
    boxes: np.ndarray | None = None  # (T, 4) x, y, w, h aligned with face frames

    @property
    def fps(self) -> float:
        ts = self.face.timestamps_ms
        return 1000.0 * (len(ts) - 1) / float(ts[-1] - ts[0])


@dataclass
class ChunkPair:
    face: np.ndarray  # (160, 3, S, S) float64
    finger: np.ndarray
    label: np.ndarray  # (160,)
    hr_ref_bpm: float
    subject_id: str
    index: int = 0
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# M3FT container


def write_frame_tensor(path, frames: FrameTensor) -> None:
    t, h, w, c = frames.pixels.shape
    path = Path(path)
    payload = (
        _HEADER.pack(MAGIC, VERSION, t, h, w, c, 0)
        + np.ascontiguousarray(frames.pixels).tobytes()
        + np.asarray(frames.timestamps_ms, dtype="<i8").tobytes()
    )
    atomic_write_bytes(path, payload)


def read_frame_tensor(path) -> FrameTensor:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TruncatedFile(f"{path}: header incomplete")
    magic, version, t, h, w, c, dtype = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != VERSION or dtype != 0:
        raise BadMagic(f"{path}: unsupported version {version} / dtype {dtype}")
    n_pix = t * h * w * c
    expected = _HEADER.size + n_pix + 8 * t
    if len(data) < expected:
        raise TruncatedFile(f"{path}: {len(data)} bytes, expected {expected}")
    pixels = np.frombuffer(data, np.uint8, n_pix, _HEADER.size).reshape(t, h, w, c).copy()
    ts = np.frombuffer(data, "<i8", t, _HEADER.size + n_pix).astype(np.int64)
    if np.any(np.diff(ts) <= 0):
        raise NonMonotonicTimestamps(f"{path}: timestamps not strictly increasing")
    return FrameTensor(pixels, ts)


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# label CSVs


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_csv(path, header) -> np.ndarray:
    """Two-column numeric CSV with a mandatory header row, as an (n, 2) array."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got is None or tuple(s.strip() for s in got) != tuple(header):
            raise ValueError(f"{path}: expected header {','.join(header)}, got {got}")
        rows = [(float(a), float(b)) for a, b in reader]
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def read_boxes(path) -> dict[int, tuple[int, int, int, int]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return {
            int(r["frame_index"]): (int(r["x"]), int(r["y"]), int(r["w"]), int(r["h"]))
            for r in reader
        }


# ---------------------------------------------------------------------------
# loading and alignment


def discover(root) -> list[RecordingLayout]:
    """Every ``<root>/<subject>/`` directory holding both views and a label dir."""
    layouts = []
    for subj in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        face = sorted(subj.glob(f"*/{FACE_FILE}"))
        finger = sorted(subj.glob(f"*/{FINGER_FILE}"))
        labels = sorted(p.parent for p in subj.glob("*/frames_timestamp.csv"))
        labels = labels or sorted(p for p in subj.glob("v*") if p.is_dir())
        if not (face and finger and labels):
            log.warning("skipping %s: incomplete recording", subj)
            continue
        boxes = face[0].parent / BOXES_FILE
        layouts.append(
            RecordingLayout(subj.name, face[0], finger[0], labels[0], boxes if boxes.exists() else None)
        )
    return layouts


def _label(layout: RecordingLayout, key: str) -> np.ndarray:
    name, header = LABEL_FILES[key]
    path = Path(layout.label_dir) / name
    if not path.exists():
        raise MissingLabelFile(str(path))
    return read_csv(path, header)


def _uniform_signal(table: np.ndarray, nominal_rate: float) -> SampledSignal:
    t = table[:, 0]
    rate = 1000.0 * (len(t) - 1) / (t[-1] - t[0]) if len(t) > 1 else nominal_rate
    return SampledSignal(table[:, 1], rate, int(round(t[0])))


def load_recording(layout: RecordingLayout) -> AlignedRecording:
    """Parse all streams and crop them to their common time span."""
    if not layout.subject_id:
        raise ValueError("subject_id must be non-empty")
    tables = {k: _label(layout, k) for k in LABEL_FILES}
    face = read_frame_tensor(layout.face_path)
    finger = read_frame_tensor(layout.finger_path)
    frame_map = tables["frames"]
    if len(frame_map) != face.n_frames or np.any(frame_map[:, 1] != face.timestamps_ms):
        log.warning("%s: frames_timestamp.csv disagrees with face container", layout.subject_id)

    bvp = tables["bvp"]
    starts = [face.timestamps_ms[0], finger.timestamps_ms[0], bvp[0, 0]]
    ends = [face.timestamps_ms[-1], finger.timestamps_ms[-1], bvp[-1, 0]]
    lo, hi = max(starts), min(ends)
    if hi <= lo:
        raise NoTemporalOverlap(f"{layout.subject_id}: streams do not overlap in time")

    keep_face = (face.timestamps_ms >= lo) & (face.timestamps_ms <= hi)
    keep_finger = (finger.timestamps_ms >= lo) & (finger.timestamps_ms <= hi)
    if keep_face.sum() < 2 or keep_finger.sum() < 2:
        raise NoTemporalOverlap(f"{layout.subject_id}: fewer than 2 overlapping frames")
    # BVP keeps one neighbouring sample each side so interpolation spans the frames
    bt = bvp[:, 0]
    i0 = max(int(np.searchsorted(bt, lo, "right")) - 1, 0)
    i1 = min(int(np.searchsorted(bt, hi, "left")) + 1, len(bt))
    boxes = None
    if layout.boxes_path is not None:
        table = read_boxes(layout.boxes_path)
        idx = np.flatnonzero(keep_face)
        boxes = np.array([table.get(int(i), (0, 0, 0, 0)) for i in idx], dtype=np.int64)

    resp = None
    if len(tables["rr"]) > 1:
        rr = tables["rr"]
        rr = rr[(rr[:, 0] >= lo) & (rr[:, 0] <= hi)]
        if len(rr) > 1:
            resp = _uniform_signal(rr, RESP_RATE_HZ)

    def window(tab):
        return tab[(tab[:, 0] >= lo) & (tab[:, 0] <= hi)]

    return AlignedRecording(
        subject_id=layout.subject_id,
        face=face.select(keep_face),
        finger=finger.select(keep_finger),
        bvp=_uniform_signal(bvp[i0:i1], BVP_RATE_HZ),
        hr=window(tables["hr"]),
        spo2=window(tables["spo2"]),
        resp=resp,
        boxes=boxes,
    )


def align_label(frames_ts_ms, bvp: SampledSignal) -> np.ndarray:
    """Linearly interpolate the BVP waveform onto each frame timestamp."""
    ts = np.asarray(frames_ts_ms, dtype=np.float64)
    bt = bvp.times_ms()
    idx = np.clip(np.searchsorted(bt, ts), 1, len(bt) - 1)
    gap = np.minimum(np.abs(ts - bt[idx - 1]), np.abs(bt[idx] - ts))
    if np.any(gap > LABEL_GAP_MS):
        raise LabelGap(f"frame up to {gap.max():.0f} ms from the nearest BVP sample")
    return np.interp(ts, bt, bvp.samples)


def diff_normalize(frames: np.ndarray, length: int = CHUNK_LEN) -> np.ndarray:
    """Normalized frame differences, (T, H, W, 3) -> (length, 3, H, W).

    d(t) = (c(t+1) - c(t)) / (c(t+1) + c(t)) per pixel and channel, with 0
    where both are 0, then divided by the global standard deviation.
    """
    c = np.asarray(frames, dtype=np.float64)
    if c.shape[0] < 2:
        raise TooFewFrames("diff_normalize needs at least 2 frames")
    if frames.dtype == np.uint8:
        c = c / 255.0
    num = c[1:] - c[:-1]
    den = c[1:] + c[:-1]
    d = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
    sd = d.std()
    if sd > 0:
        d = d / sd
    d = np.transpose(d, (0, 3, 1, 2))
    if d.shape[0] >= length:
        return np.ascontiguousarray(d[:length])
    pad = np.zeros((length - d.shape[0],) + d.shape[1:])
    return np.concatenate([d, pad], axis=0)


def crop_resize(frames: np.ndarray, box, size: int) -> np.ndarray:
    """Crop (x, y, w, h) and bilinearly resize every frame to size x size."""
    t, h, w, _ = frames.shape
    if box is not None:
        x, y, bw, bh = (int(v) for v in box)
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + bw, w), min(y + bh, h)
        if x1 <= x0 or y1 <= y0:
            raise EmptyRoi(f"crop box {box} is empty inside a {w}x{h} frame")
        frames = frames[:, y0:y1, x0:x1]
    if frames.shape[1:3] == (size, size):
        return frames
    return np.stack([cv2.resize(f, (size, size), interpolation=cv2.INTER_LINEAR) for f in frames])


def window_box(boxes: np.ndarray | None, start: int, stop: int):
    """Median valid box over a window, or None for the full-frame fallback."""
    if boxes is None:
        return None
    b = boxes[start:stop]
    b = b[(b[:, 2] > 0) & (b[:, 3] > 0)]
    if len(b) == 0:
        return None
    return tuple(int(v) for v in np.median(b, axis=0))


def matched_finger_index(rec: AlignedRecording) -> np.ndarray:
    """Index of the fingertip frame nearest in time to each face frame."""
    ft = rec.finger.timestamps_ms
    idx = np.clip(np.searchsorted(ft, rec.face.timestamps_ms), 1, len(ft) - 1)
    left_closer = (rec.face.timestamps_ms - ft[idx - 1]) <= (ft[idx] - rec.face.timestamps_ms)
    return np.where(left_closer, idx - 1, idx)


def chunk_bounds(rec: AlignedRecording, length: int = CHUNK_LEN) -> list[tuple[int, int]]:
    n = rec.face.n_frames
    if n < length:
        raise RecordingTooShort(f"{rec.subject_id}: {n} frames < {length}")
    return [(k * length, (k + 1) * length) for k in range(n // length)]


def reference_hr(rec: AlignedRecording, start: int, stop: int, aligned_bvp=None) -> float:
    """Median HR.csv value inside the window, else Welch on the aligned BVP."""
    ts = rec.face.timestamps_ms
    t0, t1 = ts[start], ts[stop - 1]
    hr = rec.hr
    if len(hr):
        inside = hr[(hr[:, 0] >= t0) & (hr[:, 0] <= t1), 1]
        if len(inside):
            return float(np.median(inside))
    if aligned_bvp is None:
        aligned_bvp = align_label(ts, rec.bvp)
    return hr_from_waveform(SampledSignal(aligned_bvp[start:stop], rec.fps))


def make_chunks(
    rec: AlignedRecording,
    crop_boxes: np.ndarray | None = None,
    size: int = CHUNK_SIZE,
    length: int = CHUNK_LEN,
) -> list[ChunkPair]:
    """Non-overlapping ``length``-frame dual-view chunks with labels and HR reference."""
    bounds = chunk_bounds(rec, length)
    boxes = crop_boxes if crop_boxes is not None else rec.boxes
    bvp = align_label(rec.face.timestamps_ms, rec.bvp)
    # label[t] = bvp[t+1] - bvp[t] pairs with frame difference d(t); last entry 0 like the padded frame
    dbvp = np.diff(bvp, append=bvp[-1])
    finger_idx = matched_finger_index(rec)
    chunks = []
    for k, (a, b) in enumerate(bounds):
        face = crop_resize(rec.face.pixels[a:b], window_box(boxes, a, b), size)
        finger = crop_resize(rec.finger.pixels[finger_idx[a:b]], None, size)
        label = dbvp[a:b]
        sd = label.std()
        label = (label - label.mean()) / sd if sd > 0 else np.zeros_like(label)
        try:
            hr_ref = reference_hr(rec, a, b, bvp)
        except NoPulse:
            hr_ref = float("nan")
        chunks.append(
            ChunkPair(
                face=diff_normalize(face, length),
                finger=diff_normalize(finger, length),
                label=label,
                hr_ref_bpm=hr_ref,
                subject_id=rec.subject_id,
                index=k,
            )
        )
    return chunks
