"""Differentiable primitives.

Layouts follow the usual conventions: images are NCHW, conv kernels are
OIHW, linear weights are (out_features, in_features). Non-differentiable
points (relu/hinge at 0, maxpool ties, argmax ties) take subgradient 0 or
the lowest flat index.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_output


class UnsupportedOperation(ValueError):
    pass


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, OH, OW, kh, kw) view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride != 1:
        win = win[:, :, ::stride, ::stride]
    return win


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError("conv2d", f"input has {c} channels but kernel expects {ci}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {h}x{wd}")
    if stride < 1:
        raise ShapeError("conv2d", f"stride must be >= 1, got {stride}")
    xp = _pad_hw(x.data, padding)
    win = _windows(xp, kh, kw, stride)
    oh, ow = win.shape[2], win.shape[3]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # N, OH, OW, O
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bwd(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw
        if x.requires_grad:
            cols = np.tensordot(g, w.data, axes=([1], [0]))  # N, OH, OW, C, kh, kw
            gxp = np.zeros_like(xp)
            he, we = stride * (oh - 1) + 1, stride * (ow - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + he:stride, j:j + we:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    return make_output("conv2d", (x, w), out, bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError("linear", f"expected 2-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError("linear", f"input features {x.shape[1]} != weight in_features {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("linear", f"bias shape {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return make_output("linear", inputs, out, bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_output("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def hinge(x: Tensor) -> Tensor:
    """max(x, 0) elementwise; subgradient 0 at the kink."""
    mask = x.data > 0
    return make_output("hinge", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def _pool_view(x: Tensor, k: int, op: str) -> np.ndarray:
    if x.data.ndim != 4:
        raise ShapeError(op, f"expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(op, f"spatial size {h}x{w} not divisible by kernel {k}")
    return x.data.reshape(n, c, h // k, k, w // k, k)


def maxpool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == kernel)."""
    n, c, h, w = x.shape if x.data.ndim == 4 else (0, 0, 0, 0)
    v = _pool_view(x, kernel, "maxpool2d")
    flat = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // kernel, w // kernel, kernel * kernel)
    idx = flat.argmax(axis=-1)  # first max == lowest flat index in the window
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // kernel, w // kernel, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return make_output("maxpool2d", (x,), out, bwd)


def avgpool2d(x: Tensor, kernel: int = 2) -> Tensor:
    v = _pool_view(x, kernel, "avgpool2d")
    out = v.mean(axis=(3, 5))
    shape = x.shape

    def bwd(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] / (kernel * kernel), v.shape)
        return (gx.reshape(shape).copy(),)

    return make_output("avgpool2d", (x,), out, bwd)


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum. ``y`` may also be a 1-D bias added along axis 1."""
    if x.shape == y.shape:
        return make_output("add", (x, y), x.data + y.data, lambda g: (g, g))
    if y.data.ndim == 1 and x.data.ndim >= 2 and y.shape[0] == x.shape[1]:
        bshape = (1, -1) + (1,) * (x.data.ndim - 2)
        axes = tuple(i for i in range(x.data.ndim) if i != 1)
        return make_output("add", (x, y), x.data + y.data.reshape(bshape),
                           lambda g: (g, g.sum(axis=axes)))
    raise ShapeError("add", f"cannot add shapes {x.shape} and {y.shape}")


def sub(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError("sub", f"cannot subtract shapes {x.shape} and {y.shape}")
    return make_output("sub", (x, y), x.data - y.data, lambda g: (g, -g))


def scale(x: Tensor, a: float) -> Tensor:
    a = float(a)
    return make_output("scale", (x,), a * x.data, lambda g: (a * g,))


def shift(x: Tensor, a: float) -> Tensor:
    a = float(a)
    return make_output("shift", (x,), x.data + a, lambda g: (g,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_output("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    shape = x.shape
    return make_output("sum", (x,), np.asarray(x.data.sum()),
                       lambda g: (np.broadcast_to(g, shape).copy(),))


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("softmax", f"expected 2-D logits, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_output("softmax", (x,), s, bwd)


def _check_labels(op: str, x: Tensor, labels: np.ndarray) -> np.ndarray:
    if x.data.ndim != 2:
        raise ShapeError(op, f"expected 2-D logits, got {x.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise ShapeError(op, f"labels shape {labels.shape} != ({x.shape[0]},)")
    if labels.size and (labels.min() < 0 or labels.max() >= x.shape[1]):
        raise ShapeError(op, f"label out of range for {x.shape[1]} classes")
    return labels


def cross_entropy(x: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross entropy from logits; reduction in {mean, sum, none}."""
    labels = _check_labels("cross_entropy", x, labels)
    n = x.shape[0]
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    per = lse - z[np.arange(n), labels]
    if reduction == "mean":
        out, w = np.asarray(per.mean()), 1.0 / n
    elif reduction == "sum":
        out, w = np.asarray(per.sum()), 1.0
    elif reduction == "none":
        out, w = per, None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        coef = g[:, None] if w is None else g * w
        return (p * coef,)

    return make_output("cross_entropy", (x,), out, bwd)


def gather(x: Tensor, labels) -> Tensor:
    """Row-wise pick: out[n] = x[n, labels[n]]."""
    labels = _check_labels("gather", x, labels)
    rows = np.arange(x.shape[0])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[rows, labels] = g
        return (gx,)

    return make_output("gather", (x,), x.data[rows, labels], bwd)


def reduce_max_excluding_index(x: Tensor, labels) -> Tensor:
    """out[n] = max_{i != labels[n]} x[n, i]; gradient 1 on the (lowest) argmax."""
    labels = _check_labels("reduce_max_excluding_index", x, labels)
    if x.shape[1] < 2:
        raise ShapeError("reduce_max_excluding_index", "need at least 2 classes")
    rows = np.arange(x.shape[0])
    masked = x.data.copy()
    masked[rows, labels] = -np.inf
    idx = masked.argmax(axis=1)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return make_output("reduce_max_excluding_index", (x,), masked[rows, idx], bwd)


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = np.logaddexp(0.0, d)
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return make_output("softplus", (x,), out, lambda g: (g * sig,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive argument")
    return make_output("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data > lo
    return make_output("clamp_min", (x,), np.where(mask, x.data, lo), lambda g: (g * mask,))


def max_abs(tensors: Sequence[Tensor]) -> Tensor:
    """max |t| over the entries of several tensors, as a 0-d tensor.

    The subgradient is sign(t) on the single argmax entry; ties go to the
    lowest flat index in the order the tensors are given.
    """
    if not tensors:
        raise ShapeError("max_abs", "no tensors given")
    best, where = -1.0, (0, 0)
    for k, t in enumerate(tensors):
        if t.data.size == 0:
            continue
        a = np.abs(t.data).ravel()
        i = int(a.argmax())
        if a[i] > best:
            best, where = float(a[i]), (k, i)

    def bwd(g):
        k, i = where
        out = [np.zeros_like(t.data) for t in tensors]
        out[k].flat[i] = np.sign(tensors[k].data.flat[i]) * float(g)
        return out

    return make_output("max_abs", tuple(tensors), np.asarray(max(best, 0.0)), bwd)


def fake_quant(x: Tensor, step: float, lo: float, hi: float) -> Tensor:
    """``step * round(clip(x / step, lo, hi))`` with a straight-through gradient.

    The gradient passes unchanged where ``lo <= x/step <= hi`` and is zero
    where the value was clipped.
    """
    step = float(step)
    r = x.data / step
    mask = (r >= lo) & (r <= hi)
    out = step * np.round(np.clip(r, lo, hi))
    return make_output("fake_quant", (x,), out, lambda g: (g * mask,))


_PRIMITIVES = {
    "conv2d": conv2d,
    "linear": linear,
    "relu": relu,
    "maxpool2d": maxpool2d,
    "avgpool2d": avgpool2d,
    "add": add,
    "sub": sub,
    "scale": scale,
    "shift": shift,
    "softmax": softmax,
    "cross_entropy": cross_entropy,
    "reduce_max_excluding_index": reduce_max_excluding_index,
    "hinge": hinge,
    "gather": gather,
    "softplus": softplus,
    "log": log,
    "clamp_min": clamp_min,
    "reshape": reshape,
    "sum": total,
    "fake_quant": fake_quant,
}


_LABELLED = {"cross_entropy", "gather", "reduce_max_excluding_index"}


def forward_primitive(kind: str, *inputs, **params) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_primitive("relu", t)``.

    Array-like tensor operands are wrapped into :class:`Tensor`; the label
    vector of the labelled kinds is passed through as is.
    """
    if kind == "max_abs":
        return max_abs([_as_tensor(t) for t in inputs[0]])
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise UnsupportedOperation(f"unsupported primitive kind {kind!r}")
    args = list(inputs)
    n_tensors = 1 if kind in _LABELLED else len(args)
    for i in range(n_tensors):
        if isinstance(args[i], (np.ndarray, list, tuple)):
            args[i] = Tensor(args[i])
    return fn(*args, **params)


def primitive_kinds() -> list:
    return sorted(list(_PRIMITIVES) + ["max_abs"])
