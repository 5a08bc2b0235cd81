"""Named parameter storage and the binary checkpoint format.

Checkpoint layout (little endian)::

    b"PFCK"  u32 version  u32 config_len  config (utf-8)  u32 n_tensors
    per tensor: u16 name_len  name  u8 ndim  u64[ndim] shape  f64[...] values
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import BadMagic, ConfigMismatch, TruncatedFile
from ..ingest import atomic_write_bytes
from .tensor import Tensor, param

CKPT_MAGIC = b"PFCK"
CKPT_VERSION = 1


class ParamStore:
    """Ordered name -> parameter map; iteration order is insertion order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = param(np.array(value, dtype=np.float64), name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise ConfigMismatch(f"parameter names differ (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
        for k, t in self._params.items():
            if state[k].shape != t.shape:
                raise ConfigMismatch(f"{k}: checkpoint shape {state[k].shape} != model shape {t.shape}")
            t.data[...] = state[k]


def encode_checkpoint(state: dict[str, np.ndarray], config_text: str = "") -> bytes:
    cfg = config_text.encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg, struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if blob[:4] != CKPT_MAGIC:
        raise BadMagic("not a pulsefuse checkpoint")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFile("checkpoint ends early")
        out = blob[pos : pos + n]
        pos += n
        return out

    version, cfg_len = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise ConfigMismatch(f"unsupported checkpoint version {version}")
    config_text = take(cfg_len).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return config_text, state


def save_checkpoint(path, store: ParamStore, config_text: str = "") -> None:
    atomic_write_bytes(Path(path), encode_checkpoint(store.state(), config_text))


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
