"""Cross-view fusion: CSSM, cross Mamba layers, F-Mamba blocks, the F3Mamba model and its loss.

Inputs are channels-last chunks ``(batch, 160, H, W, 3)`` (DiffNormalized
frames); the model predicts a ``(batch, 160)`` pulse waveform.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import DegenerateInput, InvalidConfig, NoPulse, ShapeMismatch
from .nn import tensor as T
from .nn.params import ParamStore
from .nn.scan import selective_scan
from .signalcore import DEFAULT_BAND, BandLimits
from .ssm import DEFAULT_THETA, LayerNorm, Linear, Ssm, Stem, TdMambaBlock, flatten_map

NFFT_LOSS = 512
PSD_EPS = 1e-8
N_STAGES = 3


class Cssm:
    """Selective scan whose B and C projections blend the primary and complementary views.

    Delta always comes from the primary stream.  ``mode='fused'`` discretises
    the blended B; ``mode='literal_a'`` discretises the primary B_a instead.
    """

    def __init__(self, store, name, dim: int, d_state: int, rng, lambda_b: float = 0.5,
                 lambda_c: float = 0.5, mode: str = "fused", d_skip: bool = True):
        if not (0.0 <= lambda_b <= 1.0 and 0.0 <= lambda_c <= 1.0):
            raise InvalidConfig("CSSM lambdas must lie in [0, 1]")
        if mode not in ("fused", "literal_a"):
            raise InvalidConfig(f"unknown fused_b_mode {mode!r}")
        self.ssm = Ssm(store, name, dim, d_state, rng, d_skip)
        self.lambda_b, self.lambda_c, self.mode = lambda_b, lambda_c, mode

    @staticmethod
    def _blend(pa, pb, lam):
        if lam == 0.0:
            return pa
        return (1.0 - lam) * pa + lam * pb

    def __call__(self, x_a, x_b):
        x_a, x_b = T.as_tensor(x_a), T.as_tensor(x_b)
        if x_a.shape != x_b.shape:
            raise ShapeMismatch(f"cssm views differ: {x_a.shape} vs {x_b.shape}")
        s = self.ssm
        b_a = s.b_proj(x_a)
        b_fused = self._blend(b_a, s.b_proj(x_b) if self.lambda_b else None, self.lambda_b)
        c = self._blend(s.c_proj(x_a), s.c_proj(x_b) if self.lambda_c else None, self.lambda_c)
        b_used = b_fused if self.mode == "fused" else b_a
        return selective_scan(x_a, s.delta(x_a), s.A(), b_used, c, s.d_skip)


class CrossMambaLayer:
    """Mamba layer whose scan is a CSSM: primary ``f_a``, complement ``f_b``.

    Both streams share the input norm and projections so that identical views
    reduce to the single-view layer.
    """

    def __init__(self, store, name, dim: int, d_state: int, rng, lambda_b=0.5, lambda_c=0.5,
                 mode="fused", d_skip=True):
        self.norm_in = LayerNorm(store, f"{name}.norm_in", dim)
        self.linear_x = Linear(store, f"{name}.linear_x", dim, dim, rng)
        self.linear_z = Linear(store, f"{name}.linear_z", dim, dim, rng)
        self.cssm = Cssm(store, f"{name}.cssm", dim, d_state, rng, lambda_b, lambda_c, mode, d_skip)
        self.linear_out = Linear(store, f"{name}.linear_out", dim, dim, rng)
        self.norm_out = LayerNorm(store, f"{name}.norm_out", dim)

    def __call__(self, f_a, f_b):
        h_a, h_b = self.norm_in(f_a), self.norm_in(f_b)
        y = self.cssm(self.linear_x(h_a), self.linear_x(h_b))
        return self.norm_out(self.linear_out(T.gate(y, self.linear_z(h_a))) + f_a)


class FMambaBlock:
    """Symmetric cross Mamba pair; the summed outputs pass a 1x1x1 convolution.

    Returns (F_a + fused, F_b + fused, fused), all shaped like the inputs.
    """

    def __init__(self, store, name, dim, d_state, rng, lambda_b=0.5, lambda_c=0.5, mode="fused",
                 d_skip=True, dropout=0.0):
        kw = dict(lambda_b=lambda_b, lambda_c=lambda_c, mode=mode, d_skip=d_skip)
        self.a_to_b = CrossMambaLayer(store, f"{name}.a_to_b", dim, d_state, rng, **kw)
        self.b_to_a = CrossMambaLayer(store, f"{name}.b_to_a", dim, d_state, rng, **kw)
        self.fuse_conv = Linear(store, f"{name}.fuse_conv", dim, dim, rng)
        self.dropout = dropout

    def __call__(self, f_a, f_b, train: bool = False, key=(0, 0, 0)):
        f_a, f_b = T.as_tensor(f_a), T.as_tensor(f_b)
        if f_a.shape != f_b.shape:
            raise ShapeMismatch(f"F-Mamba views differ: {f_a.shape} vs {f_b.shape}")
        s_a, s_b = flatten_map(f_a), flatten_map(f_b)
        fused = self.fuse_conv(self.a_to_b(s_a, s_b) + self.b_to_a(s_b, s_a))
        fused = T.reshape(T.dropout(fused, self.dropout, train, key), f_a.shape)
        return f_a + fused, f_b + fused, fused


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.2
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise InvalidConfig("loss weights must be non-negative")


@dataclass(frozen=True)
class F3MambaConfig:
    """Architecture config; the defaults are the desk-scale model.

    ``fusion``: "hierarchical" fuses after every stage and feeds stages 0 and 1
    back residually, "final" fuses once after the last stage.  ``cssm=False``
    sets both CSSM lambdas to 0.  ``views`` selects both branches or one.
    """

    channels: int = 8
    d_state: int = 8
    input_size: int = 16
    frames: int = 160
    stem_strides: tuple = (1, 1, 1)
    theta: float = DEFAULT_THETA
    dropout: float = 0.1
    lambda_b: float = 0.5
    lambda_c: float = 0.5
    fused_b_mode: str = "fused"
    d_skip: bool = True
    fusion: str = "hierarchical"
    cssm: bool = True
    views: str = "both"
    seed: int = 0

    def validate(self) -> None:
        if self.fusion not in ("hierarchical", "final"):
            raise InvalidConfig(f"fusion must be hierarchical or final, got {self.fusion!r}")
        if self.views not in ("both", "face", "finger"):
            raise InvalidConfig(f"views must be both, face or finger, got {self.views!r}")
        if self.channels < 1 or self.d_state < 1 or self.frames < 3:
            raise InvalidConfig("channels, d_state >= 1 and frames >= 3 required")
        if len(self.stem_strides) != 3:
            raise InvalidConfig("stem_strides needs three entries")
        side = self.input_size
        for s in self.stem_strides:
            side = -(-side // s)
        if side % 8:
            raise InvalidConfig(f"post-stem spatial size {side} must be divisible by 8")

    def branch_size(self) -> int:
        side = self.input_size
        for s in self.stem_strides:
            side = -(-side // s)
        return side

    def as_dict(self) -> dict:
        return asdict(self)


FULL_CONFIG = F3MambaConfig(channels=64, d_state=16, input_size=128, stem_strides=(2, 2, 2))


def variant_config(base: F3MambaConfig, name: str) -> F3MambaConfig:
    """Ablation ladder: V0 face only, V1 finger only, V2/V3 final fusion, V4/V5 hierarchical.

    V3 and V5 carry the CSSM; V2 and V4 do not.
    """
    from dataclasses import replace

    table = {
        "V0": dict(views="face", cssm=False),
        "V1": dict(views="finger", cssm=False),
        "V2": dict(views="both", fusion="final", cssm=False),
        "V3": dict(views="both", fusion="final", cssm=True),
        "V4": dict(views="both", fusion="hierarchical", cssm=False),
        "V5": dict(views="both", fusion="hierarchical", cssm=True),
    }
    if name not in table:
        raise InvalidConfig(f"unknown variant {name!r}")
    return replace(base, **table[name])


class F3Mamba:
    def __init__(self, cfg: F3MambaConfig):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(cfg.seed)
        c, n = cfg.channels, cfg.d_state
        lam_b, lam_c = (cfg.lambda_b, cfg.lambda_c) if cfg.cssm else (0.0, 0.0)
        self.branches = {}
        for view in ("face", "finger"):
            if cfg.views in ("both", view):
                stem = Stem(self.store, f"{view}.stem", c, rng, cfg.stem_strides)
                blocks = [
                    TdMambaBlock(self.store, f"{view}.td{i}", c, n, rng, cfg.theta, cfg.d_skip)
                    for i in range(N_STAGES)
                ]
                self.branches[view] = (stem, blocks)
        self.fblocks = {}
        if cfg.views == "both":
            stages = range(N_STAGES) if cfg.fusion == "hierarchical" else [N_STAGES - 1]
            for i in stages:
                self.fblocks[i] = FMambaBlock(
                    self.store, f"fuse{i}", c, n, rng, lam_b, lam_c, cfg.fused_b_mode, cfg.d_skip, cfg.dropout
                )
        self.head = Linear(self.store, "head", c, 1, rng)

    def param_count(self) -> int:
        return self.store.count()

    def _check(self, x, view):
        if x is None:
            raise ShapeMismatch(f"{view} chunk missing")
        x = T.as_tensor(x)
        want = (self.cfg.frames, self.cfg.input_size, self.cfg.input_size, 3)
        if x.ndim != 5 or x.shape[1:] != want:
            raise ShapeMismatch(f"{view} chunk must be (B, {', '.join(map(str, want))}), got {x.shape}")
        return x

    def __call__(self, face=None, finger=None, train: bool = False, step: int = 0):
        feats = {}
        for view, x in (("face", face), ("finger", finger)):
            if view in self.branches:
                feats[view] = self.branches[view][0](self._check(x, view))
        if len(feats) == 2 and feats["face"].shape[0] != feats["finger"].shape[0]:
            raise ShapeMismatch("face and finger batches differ")
        out = None
        for i in range(N_STAGES):
            for view in feats:
                feats[view] = self.branches[view][1][i](feats[view])
            if i in self.fblocks:
                fa, fb, fused = self.fblocks[i](feats["face"], feats["finger"], train, (self.cfg.seed, i, step))
                feats["face"], feats["finger"] = fa, fb
                out = fused
        if out is None:
            out = next(iter(feats.values()))
        pooled = T.adaptive_avgpool_spatial(out)
        b, t = pooled.shape[:2]
        return T.reshape(self.head(T.reshape(pooled, (b, t, self.cfg.channels))), (b, t))


# ---------------------------------------------------------------------------
# losses


def _as_batch(pred, label):
    pred = T.as_tensor(pred)
    label = np.asarray(label, dtype=np.float64)
    if pred.ndim == 1:
        pred = T.reshape(pred, (1, -1))
    if label.ndim == 1:
        label = label[None, :]
    if pred.shape != label.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs label {label.shape}")
    return pred, label


def np_loss(pred, label) -> T.Tensor:
    """Negative Pearson correlation, averaged over the batch."""
    pred, label = _as_batch(pred, label)
    lc = label - label.mean(axis=1, keepdims=True)
    lnorm = np.sqrt((lc**2).sum(axis=1))
    if np.any(lnorm == 0):
        raise DegenerateInput("label is constant")
    pc = pred - T.mean(pred, axis=1, keepdims=True)
    pss = T.sum_(pc * pc, axis=1)
    if np.any(pss.data == 0):
        raise DegenerateInput("prediction is constant")
    r = T.sum_(pc * lc, axis=1) / (T.sqrt(pss) * lnorm)
    return -T.mean(r)


def _dft_basis(n: int, rate_hz: float, band: BandLimits, nfft: int = NFFT_LOSS):
    k = np.arange(nfft // 2 + 1)
    f = k * rate_hz / nfft
    k = k[(f >= band.lo_hz) & (f <= band.hi_hz)]
    if len(k) == 0:
        raise NoPulse("no periodogram bins inside the band")
    arg = 2 * np.pi * np.outer(np.arange(n), k) / nfft
    return np.cos(arg), np.sin(arg), k * rate_hz / nfft


def inband_periodogram(x, rate_hz: float = 30.0, band: BandLimits = DEFAULT_BAND) -> T.Tensor:
    """Differentiable in-band periodogram of mean-removed rows, zero-padded to 512 points."""
    x = T.as_tensor(x)
    cos, sin, _ = _dft_basis(x.shape[-1], rate_hz, band)
    xc = x - T.mean(x, axis=-1, keepdims=True)
    re, im = T.matmul(xc, cos), T.matmul(xc, sin)
    return re * re + im * im


def _label_psd(label, rate_hz, band):
    cos, sin, _ = _dft_basis(label.shape[-1], rate_hz, band)
    lc = label - label.mean(axis=-1, keepdims=True)
    p = (lc @ cos) ** 2 + (lc @ sin) ** 2
    if np.any(p.max(axis=-1) <= 0) or np.any(p.max(axis=-1) <= p.min(axis=-1) * (1 + 1e-9)):
        raise NoPulse("label spectrum is flat inside the band")
    return p


def _normalised(p, k: int):
    """(p / sum p + eps) / (1 + K eps): a probability vector with an eps floor."""
    if isinstance(p, T.Tensor):
        total = T.sum_(p, axis=-1, keepdims=True)
        return (p / total + PSD_EPS) / (1.0 + k * PSD_EPS)
    return (p / p.sum(axis=-1, keepdims=True) + PSD_EPS) / (1.0 + k * PSD_EPS)


def freq_ce_loss(pred, label, rate_hz: float = 30.0, band: BandLimits = DEFAULT_BAND) -> T.Tensor:
    """Cross-entropy of the softmax of the prediction's in-band log-power.

    The target class is the label's peak in-band bin.  Logits are
    log(P / sum P + eps), so the softmax equals the eps-floored normalised
    spectrum and the loss does not depend on the prediction's scale.
    """
    pred, label = _as_batch(pred, label)
    target = _label_psd(label, rate_hz, band).argmax(axis=-1)
    p = inband_periodogram(pred, rate_hz, band)
    logits = T.log(p / T.sum_(p, axis=-1, keepdims=True) + PSD_EPS)
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(target)), target]
    return -T.mean(picked)


def kl_psd_loss(pred, label, rate_hz: float = 30.0, band: BandLimits = DEFAULT_BAND) -> T.Tensor:
    """KL(P_label || P_pred) between eps-floored normalised in-band spectra."""
    pred, label = _as_batch(pred, label)
    pl = _label_psd(label, rate_hz, band)
    k = pl.shape[-1]
    p_label = _normalised(pl, k)
    q = _normalised(inband_periodogram(pred, rate_hz, band), k)
    kl = T.sum_(p_label * (np.log(p_label) - T.log(q)), axis=-1)
    return T.mean(kl)


def total_loss(pred, label, w: LossWeights = LossWeights(), rate_hz: float = 30.0,
               band: BandLimits = DEFAULT_BAND) -> T.Tensor:
    terms = []
    if w.lambda1:
        terms.append(w.lambda1 * np_loss(pred, label))
    if w.lambda2:
        terms.append(w.lambda2 * freq_ce_loss(pred, label, rate_hz, band))
    if w.lambda3:
        terms.append(w.lambda3 * kl_psd_loss(pred, label, rate_hz, band))
    if not terms:
        return T.Tensor(np.array(0.0))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def config_fields() -> list[str]:
    return [f.name for f in fields(F3MambaConfig)]
