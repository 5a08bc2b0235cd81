"""Flat ``key = value`` configuration files.

Keys are dotted (``model.channels``, ``train.lr``); blank lines and ``#``
comments are ignored; unknown keys are rejected.  Every key and its default
is listed in :data:`KEYS`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..errors import InvalidConfig
from ..fusion import F3MambaConfig, LossWeights, variant_config


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


@dataclass(frozen=True)
class SynthSettings:
    n_recordings: int = 20
    hr_min: float = 50.0
    hr_max: float = 150.0
    duration_s: float = 16.0
    fps: float = 30.0
    frame_size: int = 32
    noise_sd: float = 0.01
    face_amplitude: float = 0.02
    finger_amplitude: float = 0.06
    artifacts: str = "none"  # none | face_dropout | one_view


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch: int = 4
    lr: float = 5e-5
    seed: int = 0
    fold: int = -1  # -1: train on every subject; k: hold out fold k for validation
    folds: int = 3
    max_steps: int = 0  # 0: no cap
    stop_train_corr: float = 0.0  # > 0: stop once every training chunk exceeds it (eval mode)
    np_warmup_epochs: int = 0  # leading epochs trained on the NP term alone
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch < 1 or self.lr < 0 or self.folds < 1:
            raise InvalidConfig("epochs, batch, folds >= 1 and lr >= 0 required")


@dataclass(frozen=True)
class GradCheckSettings:
    coords_per_param: int = 4
    # max-pooling makes the model piecewise smooth; a +-1e-5 step can straddle an argmax switch
    eps: float = 1e-6
    tol: float = 1e-3
    batch: int = 1
    skip_kinks: bool = True  # resample coordinates whose probe crosses a max-pool switch


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    chunk_size: int = 16
    synth: SynthSettings = field(default_factory=SynthSettings)
    model: F3MambaConfig = field(default_factory=F3MambaConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gradcheck: GradCheckSettings = field(default_factory=GradCheckSettings)

    def to_text(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in flatten(self).items()) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def _parsers(cls) -> dict:
    out = {}
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else f.type.__name__
        if t == "bool":
            out[f.name] = _bool
        elif t == "int":
            out[f.name] = int
        elif t == "float":
            out[f.name] = float
        elif t == "tuple":
            out[f.name] = _int_tuple
        elif t == "str":
            out[f.name] = str.strip
    return out


SECTIONS = {
    "synth": SynthSettings,
    "model": F3MambaConfig,
    "train": TrainConfig,
    "gradcheck": GradCheckSettings,
}
LOSS_KEYS = {"train.loss_np": "lambda1", "train.loss_ce": "lambda2", "train.loss_kl": "lambda3"}
TOP_KEYS = {"seed": int, "chunk_size": int, "model.variant": str.strip}


def _key_table() -> dict:
    table = dict(TOP_KEYS)
    for sec, cls in SECTIONS.items():
        for name, fn in _parsers(cls).items():
            table[f"{sec}.{name}"] = fn
    for k in LOSS_KEYS:
        table[k] = float
    return table


KEYS = _key_table()


def flatten(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed, "chunk_size": cfg.chunk_size}
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if f.name == "weights":
                for k, attr in LOSS_KEYS.items():
                    out[k] = getattr(v, attr)
                continue
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            out[f"{sec}.{f.name}"] = v
    return out


def parse_config(text: str) -> RunConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise InvalidConfig(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise InvalidConfig(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = KEYS[key](val)
        except ValueError as exc:
            raise InvalidConfig(f"line {lineno}: bad value for {key}: {exc}") from exc
    return build_config(values)


def build_config(values: dict) -> RunConfig:
    seed = values.get("seed", 0)
    sections = {}
    for sec, cls in SECTIONS.items():
        kw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(sec + ".") and k not in LOSS_KEYS
              and k != "model.variant"}
        if sec in ("model", "train") and "seed" not in kw:
            kw["seed"] = seed
        sections[sec] = cls(**kw)
    model = sections["model"]
    if "model.variant" in values:
        model = variant_config(model, values["model.variant"])
    model.validate()
    lw = LossWeights(**{attr: values[k] for k, attr in LOSS_KEYS.items() if k in values})
    train = replace(sections["train"], weights=lw)
    train.validate()
    chunk = values.get("chunk_size", model.input_size)
    if chunk != model.input_size:
        raise InvalidConfig(f"chunk_size {chunk} must equal model.input_size {model.input_size}")
    return RunConfig(seed, chunk, sections["synth"], model, train, sections["gradcheck"])


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
