"""Forward/backward kernels on raw NCHW arrays.

Every op is a pair of plain functions over numpy arrays. Arrays keep the
dtype they are given (float32 in normal use, float64 for gradient checks);
reductions accumulate in float64.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError

# cap on the number of elements in one im2col buffer
_COL_BUDGET = 1 << 24


def _check4(x, name="x"):
    if x.ndim != 4:
        raise ConfigError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ConfigError(f"{name} has a zero-sized dimension: {x.shape}")


def same_padding(kh, kw):
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"only odd kernels are supported, got {kh}x{kw}")
    return (kh - 1) // 2, (kw - 1) // 2


def _conv_same(x, w):
    """Same-padded stride-1 cross-correlation via im2col + matmul.

    The im2col buffer is built in horizontal bands so that large images do
    not materialize a multi-GB column matrix.
    """
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if kh == 1 and kw == 1:
        return np.matmul(w.reshape(o, c), x.reshape(n, c, h * wd)).reshape(n, o, h, wd)
    ph, pw = same_padding(kh, kw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    wmat = w.reshape(o, c * kh * kw)
    out = np.empty((n, o, h, wd), dtype=np.result_type(x, w))
    rows = max(1, _COL_BUDGET // max(1, n * wd * c * kh * kw))
    for r0 in range(0, h, rows):
        r1 = min(h, r0 + rows)
        band = xp[:, :, r0:r1 + kh - 1, :]
        # (n, c, rows, wd, kh, kw) -> (c, kh, kw, n, rows, wd)
        win = sliding_window_view(band, (kh, kw), axis=(2, 3))
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, -1)
        res = wmat @ cols
        out[:, :, r0:r1, :] = res.reshape(o, n, r1 - r0, wd).transpose(1, 0, 2, 3)
    return out


def conv2d_forward(x, w, b):
    """out[:, o] = b[o] + sum_i x[:, i] (*) w[o, i], same padding, stride 1."""
    _check4(x)
    _check4(w, "w")
    if x.shape[1] != w.shape[1]:
        raise ConfigError(
            f"channel mismatch: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ConfigError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    out = _conv_same(x, w)
    out += b.reshape(1, -1, 1, 1).astype(out.dtype, copy=False)
    return out


def conv2d_backward(grad_out, x, w, need_input_grad=True):
    """Returns (grad_x, grad_w, grad_b); grad_x is None if not requested."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if grad_out.shape != (n, o, h, wd):
        raise RuntimeError(f"grad_out shape {grad_out.shape} != forward output {(n, o, h, wd)}")
    ph, pw = same_padding(kh, kw)
    grad_b = grad_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(w.dtype)

    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    grad_w = np.zeros((o, c * kh * kw), dtype=np.float64)
    rows = max(1, _COL_BUDGET // max(1, n * wd * c * kh * kw))
    for r0 in range(0, h, rows):
        r1 = min(h, r0 + rows)
        win = sliding_window_view(xp[:, :, r0:r1 + kh - 1, :], (kh, kw), axis=(2, 3))
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, -1)
        g = grad_out[:, :, r0:r1, :].transpose(1, 0, 2, 3).reshape(o, -1)
        grad_w += g @ cols.T
    grad_w = grad_w.reshape(o, c, kh, kw).astype(w.dtype)

    grad_x = None
    if need_input_grad:
        # transpose of same-padded correlation = correlation with the flipped,
        # channel-swapped kernel (exact for odd kernels)
        w_t = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        grad_x = _conv_same(grad_out, w_t)
    return grad_x, grad_w, grad_b


def maxpool2x2_forward(x):
    """2x2/stride-2 max pool; a trailing odd row/column is dropped.

    Returns (y, argmax) where argmax holds the in-window position 0..3
    (row-major) of the first maximal element.
    """
    _check4(x)
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ConfigError(f"max-pool needs h, w >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    q = [x[:, :, i:2 * ho:2, j:2 * wo:2] for i in (0, 1) for j in (0, 1)]
    y = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    arg = np.full(y.shape, 3, dtype=np.uint8)
    for k in (2, 1, 0):
        arg[q[k] == y] = k
    return y, arg


def maxpool2x2_backward(grad_out, argmax, input_shape):
    n, c, h, w = input_shape
    ho, wo = h // 2, w // 2
    if grad_out.shape != (n, c, ho, wo) or argmax.shape != grad_out.shape:
        raise RuntimeError(f"grad_out shape {grad_out.shape} inconsistent with input {input_shape}")
    grad_x = np.zeros(input_shape, dtype=grad_out.dtype)
    for k, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        grad_x[:, :, i:2 * ho:2, j:2 * wo:2] = np.where(argmax == k, grad_out, 0)
    return grad_x


def leaky_relu(x, slope=0.1):
    # equals max(x, slope * x) for 0 <= slope <= 1
    return np.maximum(x, x * x.dtype.type(slope))


def leaky_relu_backward(grad_out, x, slope=0.1):
    return np.where(x >= 0, grad_out, grad_out * grad_out.dtype.type(slope))


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def interp_matrix(n_in, n_out, dtype=np.float64):
    """(n_out, n_in) bilinear weights, half-pixel centers, clamped at edges."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def resize_bilinear(x, target_h, target_w):
    """Bilinear resize to any size (used for building the image pyramid)."""
    _check4(x)
    if target_h < 1 or target_w < 1:
        raise ConfigError(f"resize target must be positive, got {target_h}x{target_w}")
    ry = interp_matrix(x.shape[2], target_h, x.dtype)
    rx = interp_matrix(x.shape[3], target_w, x.dtype)
    return ry @ x @ rx.T


def bilinear_upsample(x, target_h, target_w):
    _check4(x)
    if target_h < x.shape[2] or target_w < x.shape[3]:
        raise ConfigError(
            f"upsample target {target_h}x{target_w} smaller than source {x.shape[2]}x{x.shape[3]}")
    return resize_bilinear(x, target_h, target_w)


def bilinear_upsample_backward(grad_out, input_shape):
    ry = interp_matrix(input_shape[2], grad_out.shape[2], grad_out.dtype)
    rx = interp_matrix(input_shape[3], grad_out.shape[3], grad_out.dtype)
    return ry.T @ grad_out @ rx


def softmax_across_scales(stack):
    """Softmax over axis 0 of an (S, n, c, h, w) stack, independently per pixel."""
    stack = np.asarray(stack)
    if stack.ndim != 5:
        raise ConfigError(f"expected an (S, n, c, h, w) stack, got shape {stack.shape}")
    shifted = stack - stack.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_across_scales_backward(grad_out, probs):
    inner = (grad_out * probs).sum(axis=0, keepdims=True)
    return probs * (grad_out - inner)


def elementwise_mul(a, b):
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def elementwise_mul_backward(grad_out, a, b):
    return grad_out * b, grad_out * a


def mse_loss(pred, target):
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred.astype(np.float64) - target
    return float(np.mean(d * d))


def mse_loss_backward(pred, target, grad=1.0):
    d = pred.astype(np.float64) - target
    return (grad * 2.0 * d / d.size).astype(pred.dtype)
