"""Single-view branch: stem, temporal-difference convolution, selective SSM, Mamba layer.

Feature maps are channels-last ``(batch, T, H, W, C)``.  A map is flattened
to a sequence ``(batch, T*H*W, C)`` in temporal-major order (every spatial
position of frame t before frame t+1) and scanned forward only.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import OddSpatialDims, ShapeMismatch
from .nn import tensor as T
from .nn.params import ParamStore
from .nn.scan import selective_scan

DEFAULT_THETA = 0.5
DT_MIN, DT_MAX = 1e-3, 1e-1


class Linear:
    """y = x @ w + b with w of shape (din, dout), uniform(+-1/sqrt(din)) init."""

    def __init__(self, store: ParamStore, name: str, din: int, dout: int, rng, bias: bool = True):
        bound = 1.0 / math.sqrt(din)
        self.w = store.add(f"{name}.w", rng.uniform(-bound, bound, (din, dout)))
        self.b = store.add(f"{name}.b", rng.uniform(-bound, bound, dout)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.w, self.b)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gamma = store.add(f"{name}.gamma", np.ones(dim))
        self.beta = store.add(f"{name}.beta", np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class Conv3d:
    def __init__(self, store, name, cin, cout, kernel, rng, stride=1, bias=True):
        kernel = tuple(kernel)
        bound = 1.0 / math.sqrt(cin * int(np.prod(kernel)))
        self.w = store.add(f"{name}.w", rng.uniform(-bound, bound, (*kernel, cin, cout)))
        self.b = store.add(f"{name}.b", rng.uniform(-bound, bound, cout)) if bias else None
        self.stride = stride

    def __call__(self, x):
        return T.conv3d(x, self.w, self.b, stride=self.stride)


class Stem:
    """Three (1, 3, 3) convolutions with SiLU: 3 -> C/2 -> C -> C channels.

    ``strides`` holds the spatial stride of each layer; (2, 2, 2) gives the 8x
    reduction used at full scale, (1, 1, 1) keeps desk-scale inputs intact.
    """

    def __init__(self, store, name, channels: int, rng, strides=(2, 2, 2)):
        widths = [3, max(channels // 2, 1), channels, channels]
        self.convs = [
            Conv3d(store, f"{name}.conv{i}", widths[i], widths[i + 1], (1, 3, 3), rng, stride=(1, s, s))
            for i, s in enumerate(strides)
        ]

    def __call__(self, x):
        if x.ndim != 5 or x.shape[-1] != 3:
            raise ShapeMismatch(f"stem expects (B, T, H, W, 3), got {x.shape}")
        for conv in self.convs:
            x = T.silu(conv(x))
        return x


def tdc_forward(x, w, theta: float):
    """Temporal difference convolution with a (3, kh, kw, Cin, Cout) kernel.

    Vanilla "same" convolution minus ``theta`` times the centre value weighted
    by the summed taps of the two temporally adjacent kernel planes.
    """
    x, w = T.as_tensor(x), T.as_tensor(w)
    if w.shape[0] != 3:
        raise ShapeMismatch(f"TDC kernel must span 3 frames, got {w.shape}")
    if x.ndim != 5 or x.shape[1] < 3:
        raise ShapeMismatch(f"TDC needs (B, T>=3, H, W, C), got {x.shape}")
    out = T.conv3d(x, w)
    if theta == 0.0:
        return out
    kd = T.sum_(w[0], axis=(0, 1)) + T.sum_(w[2], axis=(0, 1))
    return out - theta * T.matmul(x, kd)


class Tdc:
    def __init__(self, store, name, channels: int, rng, theta: float = DEFAULT_THETA):
        if not 0.0 <= theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        bound = 1.0 / math.sqrt(channels * 27)
        self.w = store.add(f"{name}.w", rng.uniform(-bound, bound, (3, 3, 3, channels, channels)))
        self.theta = theta

    def __call__(self, x):
        return tdc_forward(x, self.w, self.theta)


class Ssm:
    """Selective SSM parameters over D channels with N states.

    A = -softplus(a_raw) (initialised to -1..-N per row), delta = softplus(x @ W_delta
    + dt_bias), B = b_proj(x), C = c_proj(x), optional skip y += d_skip * x.
    """

    def __init__(self, store, name, dim: int, d_state: int, rng, d_skip: bool = True):
        self.a_raw = store.add(f"{name}.a_raw", np.tile(T.softplus_inverse(np.arange(1, d_state + 1)), (dim, 1)))
        self.delta_proj = Linear(store, f"{name}.delta_proj", dim, dim, rng, bias=False)
        dt = np.exp(rng.uniform(math.log(DT_MIN), math.log(DT_MAX), dim))
        self.dt_bias = store.add(f"{name}.dt_bias", T.softplus_inverse(dt))
        self.b_proj = Linear(store, f"{name}.b_proj", dim, d_state, rng)
        self.c_proj = Linear(store, f"{name}.c_proj", dim, d_state, rng)
        self.d_skip = store.add(f"{name}.d_skip", np.ones(dim)) if d_skip else None
        self.dim, self.d_state = dim, d_state

    def A(self):
        return -T.softplus(self.a_raw)

    def delta(self, x):
        return T.softplus(self.delta_proj(x) + self.dt_bias)

    def __call__(self, x):
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeMismatch(f"scan input must be (B, L, {self.dim}), got {x.shape}")
        return selective_scan(x, self.delta(x), self.A(), self.b_proj(x), self.c_proj(x), self.d_skip)


class MambaLayer:
    """out = LN2(linear_out(scan(x) * silu(z)) + F) with x, z = linear_x/z(LN1(F))."""

    def __init__(self, store, name, dim: int, d_state: int, rng, expand: int = 1, d_skip: bool = True):
        inner = expand * dim
        self.norm_in = LayerNorm(store, f"{name}.norm_in", dim)
        self.linear_x = Linear(store, f"{name}.linear_x", dim, inner, rng)
        self.linear_z = Linear(store, f"{name}.linear_z", dim, inner, rng)
        self.ssm = Ssm(store, f"{name}.ssm", inner, d_state, rng, d_skip)
        self.linear_out = Linear(store, f"{name}.linear_out", inner, dim, rng)
        self.norm_out = LayerNorm(store, f"{name}.norm_out", dim)

    def __call__(self, f):
        h = self.norm_in(f)
        y = T.gate(self.ssm(self.linear_x(h)), self.linear_z(h))
        return self.norm_out(self.linear_out(y) + f)


def flatten_map(x):
    b, t, h, w, c = x.shape
    return T.reshape(x, (b, t * h * w, c))


def unflatten_map(seq, shape):
    return T.reshape(seq, shape)


class TdMambaBlock:
    """TDC -> Mamba layer over the flattened map -> 2x2 spatial max-pool."""

    def __init__(self, store, name, channels: int, d_state: int, rng, theta: float = DEFAULT_THETA,
                 d_skip: bool = True):
        self.tdc = Tdc(store, f"{name}.tdc", channels, rng, theta)
        self.mamba = MambaLayer(store, f"{name}.mamba", channels, d_state, rng, d_skip=d_skip)

    def __call__(self, x):
        x = T.as_tensor(x)
        if x.ndim != 5 or x.shape[2] % 2 or x.shape[3] % 2:
            raise OddSpatialDims(f"TD-Mamba block needs even spatial dims, got {x.shape}")
        f = self.tdc(x)
        f = unflatten_map(self.mamba(flatten_map(f)), f.shape)
        return T.maxpool_spatial(f)
