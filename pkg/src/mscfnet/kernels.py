"""Raw ndarray kernels behind the differentiable ops.

Everything here works on NCHW float64 arrays and knows nothing about tapes.
``conv2d_reference`` is the slow direct-loop definition; the fast path lowers
dense convolutions to patch matrices and depthwise ones to per-tap sums.
The input gradient of a convolution is its adjoint, which is also the
transposed convolution.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError

# Upper bound on the patch-matrix buffer, in elements (~64 MB of float64).
_COLS_BUDGET = 8_000_000


def pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_out_size(n: int, k: int, stride: int, pad: int, dil: int) -> int:
    return (n + 2 * pad - dil * (k - 1) - 1) // stride + 1


def _check_conv(x_shape, w_shape, stride, padding, dilation, groups):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError(f"conv2d wants rank-4 input and kernel, got {x_shape} and {w_shape}")
    _, c, h, w = x_shape
    o, cg, kh, kw = w_shape
    if groups < 1 or c % groups:
        raise ShapeError(f"groups={groups} does not divide {c} input channels")
    if o % groups:
        raise ShapeError(f"groups={groups} does not divide {o} output channels")
    if cg * groups != c:
        raise ShapeError(f"kernel expects {cg * groups} input channels, input has {c}")
    ho = conv_out_size(h, kh, stride[0], padding[0], dilation[0])
    wo = conv_out_size(w, kw, stride[1], padding[1], dilation[1])
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty ({ho}x{wo}) for input {h}x{w}")
    return ho, wo


def _pad(x: np.ndarray, padding) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _tap(xp, i, j, stride, dilation, rows, wo):
    """Strided view of ``xp`` read by kernel tap (i, j) for output rows ``rows``."""
    r0, r1 = rows
    sh, sw = stride
    y0 = i * dilation[0] + r0 * sh
    x0 = j * dilation[1]
    return xp[:, :, y0: y0 + sh * (r1 - r0 - 1) + 1: sh, x0: x0 + sw * (wo - 1) + 1: sw]


def _row_chunks(ho, wo, per_pixel):
    step = max(1, _COLS_BUDGET // max(1, wo * per_pixel))
    for r0 in range(0, ho, step):
        yield r0, min(ho, r0 + step)


def _im2col(xp, kh, kw, stride, dilation, rows, wo):
    b, c = xp.shape[:2]
    nr = rows[1] - rows[0]
    cols = np.empty((b, c, kh, kw, nr, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = _tap(xp, i, j, stride, dilation, rows, wo)
    return cols.reshape(b, c * kh * kw, nr * wo)


def _is_depthwise(c, o, groups):
    return groups == c and o == c and groups > 1


def conv2d_forward(x, w, stride=1, padding=0, dilation=1, groups=1):
    stride, padding, dilation = pair(stride), pair(padding), pair(dilation)
    ho, wo = _check_conv(x.shape, w.shape, stride, padding, dilation, groups)
    b, c = x.shape[:2]
    o, cg, kh, kw = w.shape
    xp = _pad(x, padding)
    out = np.empty((b, o, ho, wo), dtype=x.dtype)
    if _is_depthwise(c, o, groups):
        out[...] = 0.0
        for i in range(kh):
            for j in range(kw):
                out += w[:, 0, i, j][None, :, None, None] * _tap(xp, i, j, stride, dilation, (0, ho), wo)
        return out
    og = o // groups
    for g in range(groups):
        xg = xp[:, g * cg:(g + 1) * cg]
        wm = w[g * og:(g + 1) * og].reshape(og, cg * kh * kw)
        for rows in _row_chunks(ho, wo, cg * kh * kw * b):
            cols = _im2col(xg, kh, kw, stride, dilation, rows, wo)
            out[:, g * og:(g + 1) * og, rows[0]:rows[1]] = (wm @ cols).reshape(b, og, rows[1] - rows[0], wo)
    return out


def conv2d_input_grad(gy, w, x_shape, stride=1, padding=0, dilation=1, groups=1):
    """Adjoint of :func:`conv2d_forward` with respect to its input."""
    stride, padding, dilation = pair(stride), pair(padding), pair(dilation)
    ho, wo = _check_conv(x_shape, w.shape, stride, padding, dilation, groups)
    if gy.shape[2:] != (ho, wo):
        raise ShapeError(f"gradient extent {gy.shape[2:]} does not match conv output {(ho, wo)}")
    b, c, h, wd = x_shape
    o, cg, kh, kw = w.shape
    ph, pw = padding
    gxp = np.zeros((b, c, h + 2 * ph, wd + 2 * pw), dtype=gy.dtype)
    if _is_depthwise(c, o, groups):
        for i in range(kh):
            for j in range(kw):
                _tap(gxp, i, j, stride, dilation, (0, ho), wo)[...] += w[:, 0, i, j][None, :, None, None] * gy
    else:
        og = o // groups
        for g in range(groups):
            wm = w[g * og:(g + 1) * og].reshape(og, cg * kh * kw)
            gxg = gxp[:, g * cg:(g + 1) * cg]
            for rows in _row_chunks(ho, wo, cg * kh * kw * b):
                nr = rows[1] - rows[0]
                gyg = gy[:, g * og:(g + 1) * og, rows[0]:rows[1]].reshape(b, og, nr * wo)
                gcols = (wm.T @ gyg).reshape(b, cg, kh, kw, nr, wo)
                for i in range(kh):
                    for j in range(kw):
                        _tap(gxg, i, j, stride, dilation, rows, wo)[...] += gcols[:, :, i, j]
    return gxp[:, :, ph:ph + h, pw:pw + wd]


def conv2d_weight_grad(x, gy, w_shape, stride=1, padding=0, dilation=1, groups=1):
    stride, padding, dilation = pair(stride), pair(padding), pair(dilation)
    ho, wo = _check_conv(x.shape, w_shape, stride, padding, dilation, groups)
    b, c = x.shape[:2]
    o, cg, kh, kw = w_shape
    xp = _pad(x, padding)
    gw = np.zeros(w_shape, dtype=x.dtype)
    if _is_depthwise(c, o, groups):
        for i in range(kh):
            for j in range(kw):
                gw[:, 0, i, j] = np.einsum("bchw,bchw->c", gy, _tap(xp, i, j, stride, dilation, (0, ho), wo))
        return gw
    og = o // groups
    for g in range(groups):
        xg = xp[:, g * cg:(g + 1) * cg]
        acc = np.zeros((og, cg * kh * kw), dtype=x.dtype)
        for rows in _row_chunks(ho, wo, cg * kh * kw * b):
            nr = rows[1] - rows[0]
            cols = _im2col(xg, kh, kw, stride, dilation, rows, wo)
            gyg = gy[:, g * og:(g + 1) * og, rows[0]:rows[1]].reshape(b, og, nr * wo)
            acc += np.tensordot(gyg, cols, axes=([0, 2], [0, 2]))
        gw[g * og:(g + 1) * og] = acc.reshape(og, cg, kh, kw)
    return gw


def conv2d_reference(x, w, stride=1, padding=0, dilation=1, groups=1):
    """Direct seven-loop convolution; the definition the fast path is checked against."""
    stride, padding, dilation = pair(stride), pair(padding), pair(dilation)
    ho, wo = _check_conv(x.shape, w.shape, stride, padding, dilation, groups)
    b, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    og = o // groups
    out = np.zeros((b, o, ho, wo))
    for n in range(b):
        for oc in range(o):
            g = oc // og
            for oy in range(ho):
                for ox in range(wo):
                    s = 0.0
                    for ci in range(cg):
                        for i in range(kh):
                            yy = oy * stride[0] - padding[0] + i * dilation[0]
                            if yy < 0 or yy >= h:
                                continue
                            for j in range(kw):
                                xx = ox * stride[1] - padding[1] + j * dilation[1]
                                if 0 <= xx < wd:
                                    s += x[n, g * cg + ci, yy, xx] * w[oc, ci, i, j]
                    out[n, oc, oy, ox] = s
    return out


def transposed_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n - 1) * stride - 2 * pad + k


def conv_transpose2d_forward(x, w, stride=1, padding=0):
    """Transposed convolution; ``w`` is (in_channels, out_channels, kh, kw)."""
    stride, padding = pair(stride), pair(padding)
    b, c, h, wd = x.shape
    if w.shape[0] != c:
        raise ShapeError(f"kernel expects {w.shape[0]} input channels, input has {c}")
    ho = transposed_out_size(h, w.shape[2], stride[0], padding[0])
    wo = transposed_out_size(wd, w.shape[3], stride[1], padding[1])
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed conv output would be empty ({ho}x{wo})")
    return conv2d_input_grad(x, w, (b, w.shape[1], ho, wo), stride, padding)


# ---------------------------------------------------------------------------
# pooling


def _windows(x, kernel, stride):
    kh, kw = kernel
    h, w = x.shape[2:]
    ho = (h - kh) // stride[0] + 1
    wo = (w - kw) // stride[1] + 1
    if kh < 1 or kw < 1 or ho < 1 or wo < 1:
        raise ShapeError(f"pooling window {kernel} does not fit input {h}x{w}")
    return ho, wo


def max_pool_forward(x, kernel, stride):
    kernel, stride = pair(kernel), pair(stride)
    ho, wo = _windows(x, kernel, stride)
    taps = np.stack(
        [_tap(x, i, j, stride, (1, 1), (0, ho), wo) for i in range(kernel[0]) for j in range(kernel[1])],
        axis=2,
    )
    idx = np.argmax(taps, axis=2)  # first maximal tap in row-major order
    out = np.take_along_axis(taps, idx[:, :, None], axis=2)[:, :, 0]
    return out, idx


def max_pool_backward(gy, idx, x_shape, kernel, stride):
    kernel, stride = pair(kernel), pair(stride)
    ho, wo = gy.shape[2:]
    gx = np.zeros(x_shape, dtype=gy.dtype)
    k = 0
    for i in range(kernel[0]):
        for j in range(kernel[1]):
            _tap(gx, i, j, stride, (1, 1), (0, ho), wo)[...] += np.where(idx == k, gy, 0.0)
            k += 1
    return gx


def avg_pool_forward(x, kernel, stride):
    kernel, stride = pair(kernel), pair(stride)
    ho, wo = _windows(x, kernel, stride)
    out = np.zeros(x.shape[:2] + (ho, wo), dtype=x.dtype)
    for i in range(kernel[0]):
        for j in range(kernel[1]):
            out += _tap(x, i, j, stride, (1, 1), (0, ho), wo)
    return out / (kernel[0] * kernel[1])


def avg_pool_backward(gy, x_shape, kernel, stride):
    kernel, stride = pair(kernel), pair(stride)
    ho, wo = gy.shape[2:]
    gx = np.zeros(x_shape, dtype=gy.dtype)
    share = gy / (kernel[0] * kernel[1])
    for i in range(kernel[0]):
        for j in range(kernel[1]):
            _tap(gx, i, j, stride, (1, 1), (0, ho), wo)[...] += share
    return gx


# ---------------------------------------------------------------------------
# interpolation


def bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """Rows map an input line to its ``factor``-times upsampled line.

    Half-pixel convention (corners not aligned): the source coordinate of
    output ``o`` is ``(o + 0.5) / factor - 0.5``, clamped to the input.
    """
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m
