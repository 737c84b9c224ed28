"""Differentiable primitives.

Each op computes its forward value with :mod:`mscfnet.kernels` and, when a
tape is active and an input is tracked, records a closure returning one
gradient per input (``None`` for inputs that need none).
"""

from __future__ import annotations

import warnings
from typing import Optional, Sequence

import numpy as np

from . import kernels as K
from .tensor import ShapeError, Tensor, make_result


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0, dilation=1, groups=1) -> Tensor:
    stride, padding, dilation = K.pair(stride), K.pair(padding), K.pair(dilation)
    out = K.conv2d_forward(x.data, w.data, stride, padding, dilation, groups)
    if bias is not None:
        out += bias.data[None, :, None, None]
    x_shape = x.shape

    def grad(g):
        gx = K.conv2d_input_grad(g, w.data, x_shape, stride, padding, dilation, groups) if x.requires_grad else None
        gw = K.conv2d_weight_grad(x.data, g, w.shape, stride, padding, dilation, groups) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return make_result(out, inputs, grad, "conv2d")


def transposed_conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``w`` has shape (in, out, kh, kw)."""
    stride, padding = K.pair(stride), K.pair(padding)
    out = K.conv_transpose2d_forward(x.data, w.data, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad(g):
        gx = K.conv2d_forward(g, w.data, stride, padding) if x.requires_grad else None
        # the input of the underlying conv is g, its output gradient is x
        gw = K.conv2d_weight_grad(g, x.data, w.shape, stride, padding) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return make_result(out, inputs, grad, "transposed_conv2d")


def pool2d(x: Tensor, kind: str, kernel=2, stride=2, ceil_mode: bool = False) -> Tensor:
    """Window pooling without padding.

    ``ceil_mode`` (max only) pads the bottom/right edges with -inf so that a
    partial last window still produces an output, giving ceil instead of
    floor output extents.
    """
    kernel, stride = K.pair(kernel), K.pair(stride)
    x_shape = x.shape
    if kind == "max":
        data = x.data
        if ceil_mode:
            extra = [(-(n - k) % s) if n >= k else k - n for n, k, s in zip(x_shape[2:], kernel, stride)]
            data = np.pad(data, ((0, 0), (0, 0), (0, extra[0]), (0, extra[1])), constant_values=-np.inf)
        out, idx = K.max_pool_forward(data, kernel, stride)
        padded_shape = data.shape

        def grad(g):
            gx = K.max_pool_backward(g, idx, padded_shape, kernel, stride)
            return (gx[:, :, : x_shape[2], : x_shape[3]],)
    elif kind == "avg":
        if ceil_mode:
            raise ValueError("ceil_mode is only supported for max pooling")
        out = K.avg_pool_forward(x.data, kernel, stride)

        def grad(g):
            return (K.avg_pool_backward(g, x_shape, kernel, stride),)
    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return make_result(out, (x,), grad, f"{kind}_pool2d")


def _first_argmax_mask(a: np.ndarray, axes: tuple) -> np.ndarray:
    """One-hot mask of the first (row-major) maximum over ``axes``."""
    moved = np.moveaxis(a, axes, tuple(range(a.ndim - len(axes), a.ndim)))
    flat = moved.reshape(moved.shape[: a.ndim - len(axes)] + (-1,))
    idx = np.argmax(flat, axis=-1)
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
    return np.moveaxis(mask.reshape(moved.shape), tuple(range(a.ndim - len(axes), a.ndim)), axes)


def _reduce(x: Tensor, kind: str, axes: tuple, op: str) -> Tensor:
    if kind == "avg":
        out = x.data.mean(axis=axes, keepdims=True)
        n = np.prod([x.shape[a] for a in axes])

        def grad(g):
            return (np.broadcast_to(g / n, x.shape).copy(),)
    else:
        out = x.data.max(axis=axes, keepdims=True)

        def grad(g):
            return (_first_argmax_mask(x.data, axes) * g,)

    return make_result(out, (x,), grad, op)


def global_avg_pool(x: Tensor) -> Tensor:
    return _reduce(x, "avg", (2, 3), "global_avg_pool")


def global_max_pool(x: Tensor) -> Tensor:
    return _reduce(x, "max", (2, 3), "global_max_pool")


def channel_mean(x: Tensor) -> Tensor:
    """Per-pixel mean over channels, B×1×H×W."""
    return _reduce(x, "avg", (1,), "channel_mean")


def channel_max(x: Tensor) -> Tensor:
    return _reduce(x, "max", (1,), "channel_max")


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsampling factor must be a positive integer, got {factor}")
    if factor == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "upsample")
    mh = K.bilinear_matrix(x.shape[2], factor)
    mw = K.bilinear_matrix(x.shape[3], factor)
    out = mh @ x.data @ mw.T

    def grad(g):
        return (mh.T @ g @ mw,)

    return make_result(out, (x,), grad, "upsample")


def conv1d_channels(v: Tensor, k: Tensor) -> Tensor:
    """Zero-padded 1-D convolution along the channel axis of a B×C×1×1 tensor."""
    if v.ndim != 4 or v.shape[2:] != (1, 1):
        raise ShapeError(f"conv1d_channels wants B×C×1×1, got {v.shape}")
    kk = k.data.reshape(-1)
    n = kk.size
    if n % 2 == 0:
        raise ShapeError(f"channel kernel length must be odd, got {n}")
    p = (n - 1) // 2
    b, c = v.shape[:2]
    vp = np.pad(v.data.reshape(b, c), ((0, 0), (p, p)))
    out = np.zeros((b, c))
    for j in range(n):
        out += kk[j] * vp[:, j:j + c]

    def grad(g):
        g2 = g.reshape(b, c)
        gv = gk = None
        if v.requires_grad:
            gvp = np.zeros_like(vp)
            for j in range(n):
                gvp[:, j:j + c] += kk[j] * g2
            gv = gvp[:, p:p + c].reshape(v.shape)
        if k.requires_grad:
            gk = np.array([np.sum(g2 * vp[:, j:j + c]) for j in range(n)]).reshape(k.shape)
        return gv, gk

    return make_result(out.reshape(b, c, 1, 1), (v, k), grad, "conv1d_channels")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes with the biased batch variance and folds the
    unbiased one into the running estimate, as most frameworks do.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine parameters must have shape ({c},)")
    ga = gamma.data[None, :, None, None]
    if training:
        n = x.data.size // c
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
        unbiased = var * n / (n - 1) if n > 1 else var
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]

        def grad(g):
            gx = None
            if x.requires_grad:
                dxhat = g * ga
                gx = (inv / n)[None, :, None, None] * (
                    n * dxhat
                    - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                )
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (x.data - running_mean.data[None, :, None, None]) * inv[None, :, None, None]

        def grad(g):
            gx = g * (ga * inv[None, :, None, None]) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = ga * xhat + beta.data[None, :, None, None]
    return make_result(out, (x, gamma, beta), grad, "batch_norm")


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if len(a) != len(b):
        raise ShapeError(f"cannot broadcast {a} with {b}: rank differs")
    out = []
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"cannot broadcast {a} with {b}")
        out.append(max(da, db))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    axes = tuple(i for i, (dg, ds) in enumerate(zip(g.shape, shape)) if ds == 1 and dg != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)

    def grad(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), grad, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)

    def grad(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), grad, "mul")


def add_n(xs: Sequence[Tensor]) -> Tensor:
    out = xs[0]
    for t in xs[1:]:
        out = add(out, t)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def grad(g):
        return (g * s * (1.0 - s),)

    return make_result(s, (x,), grad, "sigmoid")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """PReLU with one slope per channel (axis 1)."""
    if slope.shape != (x.shape[1],):
        raise ShapeError(f"prelu slope shape {slope.shape} does not match {x.shape[1]} channels")
    a = slope.data.reshape((1, -1) + (1,) * (x.ndim - 2))
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)

    def grad(g):
        gx = np.where(pos, g, a * g) if x.requires_grad else None
        axes = (0,) + tuple(range(2, x.ndim))
        ga = np.where(pos, 0.0, x.data * g).sum(axis=axes) if slope.requires_grad else None
        return gx, ga

    return make_result(out, (x, slope), grad, "prelu")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concat {t.shape} with {ref} along channels")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def grad(g):
        return tuple(np.split(g, splits, axis=1))

    return make_result(np.concatenate([t.data for t in xs], axis=1), tuple(xs), grad, "concat")


def _shuffle(a: np.ndarray, groups: int) -> np.ndarray:
    b, c = a.shape[:2]
    return a.reshape((b, groups, c // groups) + a.shape[2:]).swapaxes(1, 2).reshape(a.shape)


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    c = x.shape[1]
    if groups < 1 or c % groups:
        raise ShapeError(f"shuffle groups {groups} do not divide {c} channels")
    out = _shuffle(x.data, groups)

    def grad(g):
        return (_shuffle(g, c // groups),)

    return make_result(out, (x,), grad, "channel_shuffle")


def sum_all(x: Tensor) -> Tensor:
    def grad(g):
        return (np.full(x.shape, float(g)),)

    return make_result(np.array(x.data.sum()), (x,), grad, "sum")


def scale(x: Tensor, c: float) -> Tensor:
    return make_result(x.data * c, (x,), lambda g: (g * c,), "scale")


def log_softmax_channels(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    ignore_index: int = 255,
    class_weights: Optional[np.ndarray] = None,
) -> Tensor:
    """Pixelwise softmax cross-entropy averaged over non-ignored pixels.

    With class weights the average is weighted (sum of w·nll over sum of w).
    If every pixel is ignored the loss is defined as 0 and a warning is issued.
    """
    b, k = logits.shape[:2]
    labels = np.asarray(labels)
    if labels.shape != (b,) + logits.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore_index
    if np.any(labels[valid] >= k) or np.any(labels[valid] < 0):
        raise ValueError(f"label values must be in [0, {k}) or {ignore_index}")
    safe = np.where(valid, labels, 0).astype(np.int64)
    logp = log_softmax_channels(logits.data)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    w = valid.astype(np.float64)
    if class_weights is not None:
        w = w * np.asarray(class_weights, dtype=np.float64)[safe]
    total = w.sum()
    loss = -(w * picked).sum() / total if total > 0 else 0.0

    def grad(g):
        if total == 0:
            return (np.zeros_like(logits.data),)
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return (float(g) * (p - onehot) * (w / total)[:, None],)

    if total == 0:
        warnings.warn("cross_entropy: every pixel is ignored, loss set to 0", RuntimeWarning, stacklevel=2)
    return make_result(np.array(loss), (logits,), grad, "cross_entropy")
