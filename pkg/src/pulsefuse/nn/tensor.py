"""A small reverse-mode autodiff kernel over float64 numpy arrays.

Every op returns a new :class:`Tensor` holding its parents and a closure that
maps the output gradient to one gradient per parent.  :func:`backward` walks
the graph in reverse topological order.  Feature maps are channels-last,
``(batch, T, H, W, C)``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from ..errors import NonFiniteValue, NotScalarLoss, ShapeMismatch

DTYPE = np.float64

# When a list, max-pools append their argmax pattern (used by grad_check to spot kinks).
selection_log: list | None = None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    # make ndarray (op) Tensor defer to the Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # numpy-like surface
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    # a finite sum implies finite entries; only a non-finite sum needs the full scan
    if not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"non-finite value produced by {op}")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
        "div",
    )


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), "silu")


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(softplus_np(a.data), (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def gate(y, z) -> Tensor:
    """Sigmoid-linear gating ``y * silu(z)``."""
    return mul(y, silu(z))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), back, "slice")


slice_ = getitem


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(out, tuple(tensors), back, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is (in, out)."""
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        parents += [gamma, beta]
        out = xhat * gamma.data + beta.data

    def back(g):
        gx_hat = g * gamma.data if gamma is not None else g
        n = x.shape[-1]
        gx = inv / n * (
            n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True)
        )
        if gamma is None:
            return (gx,)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, tuple(parents), back, "layer_norm")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    out = x.data - lse
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# convolution and pooling (channels-last)


def _triple(v):
    return (v, v, v) if isinstance(v, int) else tuple(v)


def conv3d(x, w, b=None, stride=1, padding: str = "same") -> Tensor:
    """3-D convolution of (B, T, H, W, Cin) with w of shape (kt, kh, kw, Cin, Cout).

    ``padding`` is ``"same"`` (zero padding, output size ceil(in / stride)) or
    ``"valid"``.  Computed as one small matmul per kernel tap; at the channel
    counts used here this beats an explicit im2col, whose copies dominate.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or x.shape[-1] != w.shape[3]:
        raise ShapeMismatch(f"conv3d: input {x.shape}, weight {w.shape}")
    st = _triple(stride)
    k = w.shape[:3]
    if padding == "same":
        pads = [(kk - 1) // 2 for kk in k]
        pad_hi = [kk - 1 - p for kk, p in zip(k, pads)]
        xp = np.pad(x.data, [(0, 0)] + list(zip(pads, pad_hi)) + [(0, 0)])
        out_sz = [-(-n // s) for n, s in zip(x.shape[1:4], st)]
    elif padding == "valid":
        xp = x.data
        out_sz = [(n - kk) // s + 1 for n, kk, s in zip(x.shape[1:4], k, st)]
    else:
        raise ValueError(f"unknown padding {padding!r}")
    if min(out_sz) <= 0:
        raise ShapeMismatch(f"conv3d: kernel {k} larger than input {x.shape}")
    bsz, cout = x.shape[0], w.shape[4]

    def tap_view(arr, i, j, l):
        return arr[
            :,
            i : i + st[0] * (out_sz[0] - 1) + 1 : st[0],
            j : j + st[1] * (out_sz[1] - 1) + 1 : st[1],
            l : l + st[2] * (out_sz[2] - 1) + 1 : st[2],
        ]

    out = np.zeros((bsz, *out_sz, cout))
    taps = [(i, j, l) for i in range(k[0]) for j in range(k[1]) for l in range(k[2])]
    for i, j, l in taps:
        out += tap_view(xp, i, j, l) @ w.data[i, j, l]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents.append(b)

    def back(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            g2 = g.reshape(-1, cout)
        for i, j, l in taps:
            if w.requires_grad:
                gw[i, j, l] = tap_view(xp, i, j, l).reshape(-1, x.shape[-1]).T @ g2
            if x.requires_grad:
                tap_view(gxp, i, j, l)[...] += g @ w.data[i, j, l].T
        if x.requires_grad:
            if padding == "same":
                sl = tuple(slice(p, p + n) for p, n in zip(pads, x.shape[1:4]))
                gx = gxp[(slice(None),) + sl]
            else:
                gx = gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    return _make(out, tuple(parents), back, "conv3d")


def maxpool_spatial(x) -> Tensor:
    """2 x 2 max pooling over H and W of a (B, T, H, W, C) map."""
    x = as_tensor(x)
    bsz, t, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"maxpool_spatial needs even H, W; got {h}x{w}")
    blocks = x.data.reshape(bsz, t, h // 2, 2, w // 2, 2, c).transpose(0, 1, 2, 4, 3, 5, 6)
    blocks = blocks.reshape(bsz, t, h // 2, w // 2, 4, c)
    arg = blocks.argmax(axis=4)
    if selection_log is not None:
        selection_log.append(arg.tobytes())
    out = np.take_along_axis(blocks, arg[:, :, :, :, None, :], axis=4)[:, :, :, :, 0, :]

    def back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[:, :, :, :, None, :], g[:, :, :, :, None, :], axis=4)
        gb = gb.reshape(bsz, t, h // 2, w // 2, 2, 2, c).transpose(0, 1, 2, 4, 3, 5, 6)
        return (gb.reshape(x.shape),)

    return _make(out, (x,), back, "maxpool")


def adaptive_avgpool_spatial(x) -> Tensor:
    """Average over H and W: (B, T, H, W, C) -> (B, T, 1, 1, C)."""
    return mean(as_tensor(x), axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# dropout


def dropout_mask(shape, p: float, key: tuple[int, ...]) -> np.ndarray:
    """Counter-based keep mask; ``key`` = (seed, layer, step) fixes it exactly."""
    seed, layer, step = (int(v) for v in key)
    bitgen = np.random.Philox(key=np.array([seed, layer], dtype=np.uint64),
                              counter=np.array([step, 0, 0, 0], dtype=np.uint64))
    return (np.random.Generator(bitgen).random(shape) >= p) / (1.0 - p)


def dropout(x, p: float, train: bool, key=(0, 0, 0)) -> Tensor:
    x = as_tensor(x)
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout p must be in [0, 1)")
    m = dropout_mask(x.shape, p, key)
    return _make(x.data * m, (x,), lambda g: (g * m,), "dropout")


# ---------------------------------------------------------------------------
# graph traversal


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise NotScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def no_nan(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteValue(f"non-finite values in {what}")
    return x


def param(data, name: str | None = None) -> Tensor:
    t = Tensor(data, requires_grad=True)
    t.grad = np.zeros_like(t.data)
    if name:
        t.op = f"param:{name}"
    return t


def softplus_inverse(y) -> np.ndarray:
    y = np.asarray(y, dtype=DTYPE)
    return y + np.log(-np.expm1(-y))


__all__ = [
    "Tensor", "add", "sub", "mul", "div", "power", "sqrt", "exp", "log", "sigmoid", "silu",
    "softplus", "gate", "sum_", "mean", "reshape", "transpose", "getitem", "slice_", "concat",
    "matmul", "linear", "layer_norm", "log_softmax", "conv3d", "maxpool_spatial",
    "adaptive_avgpool_spatial", "dropout", "backward", "param", "math",
]
