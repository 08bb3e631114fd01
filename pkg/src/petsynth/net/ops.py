"""Differentiable array ops in NHWC layout.

Every op is a (forward, backward) pair: forward returns ``(out, cache)`` and
backward maps the upstream gradient plus the cache to input (and parameter)
gradients.  All ops preserve the input dtype, so gradient checks can run the
whole stack in float64 while training runs in float32.

Convolution weights are ``(kh, kw, c_in, c_out)``; dense weights ``(d, m)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def same_pad(kernel: int, dilation: int) -> int:
    """Padding that keeps stride-1 output size equal to input size (odd kernels)."""
    return dilation * (kernel - 1) // 2


def _windows(x_pad: np.ndarray, kh: int, kw: int, stride: int, dilation: int) -> np.ndarray:
    """Strided view (n, ho, wo, c, kh, kw) over a padded NHWC array."""
    ekh = dilation * (kh - 1) + 1
    ekw = dilation * (kw - 1) + 1
    win = sliding_window_view(x_pad, (ekh, ekw), axis=(1, 2))
    return win[:, ::stride, ::stride, :, ::dilation, ::dilation]


def conv2d(x, w, b, stride: int = 1, dilation: int = 1):
    """Cross-correlation with same-style padding; output (n, ho, wo, c_out)."""
    kh, kw, c_in, c_out = w.shape
    if x.shape[3] != c_in:
        raise ValueError(f"conv expects {c_in} input channels, got {x.shape[3]}")
    p = same_pad(kh, dilation)
    x_pad = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    cols = _windows(x_pad, kh, kw, stride, dilation)
    n, ho, wo = cols.shape[:3]
    # (n*ho*wo, c*kh*kw) @ (c*kh*kw, c_out) runs on BLAS
    cols2 = np.ascontiguousarray(cols).reshape(n * ho * wo, c_in * kh * kw)
    w2 = np.ascontiguousarray(w.transpose(2, 0, 1, 3)).reshape(c_in * kh * kw, c_out)
    out = (cols2 @ w2).reshape(n, ho, wo, c_out) + b
    return out, (x, w, stride, dilation, cols2, (n, ho, wo))


def conv2d_backward(dout, cache):
    x, w, stride, dilation, cols2, (n, ho, wo) = cache
    kh, kw, c_in, c_out = w.shape
    p = same_pad(kh, dilation)
    dout2 = dout.reshape(n * ho * wo, c_out)
    dw2 = cols2.T @ dout2
    dw = dw2.reshape(c_in, kh, kw, c_out).transpose(1, 2, 0, 3)
    db = dout2.sum(axis=0)
    hp, wp = x.shape[1] + 2 * p, x.shape[2] + 2 * p
    dx_pad = np.zeros((n, hp, wp, c_in), dtype=dout.dtype)
    for ki in range(kh):
        for kj in range(kw):
            contrib = dout @ w[ki, kj].T
            dx_pad[:, ki * dilation: ki * dilation + stride * ho: stride,
                   kj * dilation: kj * dilation + stride * wo: stride, :] += contrib
    dx = dx_pad[:, p: hp - p, p: wp - p, :] if p else dx_pad
    return dx, dw, db


def conv2d_transpose(x, w, b, stride: int):
    """Learned upsampling by an even stride: kernel 2s, pad s/2, output s*H."""
    if stride % 2:
        raise ValueError("transposed conv stride must be even")
    kh, kw, c_in, c_out = w.shape
    if kh != 2 * stride or kw != 2 * stride:
        raise ValueError(f"transposed conv kernel must be {2 * stride}, got {kh}")
    if x.shape[3] != c_in:
        raise ValueError(f"transposed conv expects {c_in} channels, got {x.shape[3]}")
    n, h, wdt = x.shape[:3]
    p = stride // 2
    hp, wp = (h - 1) * stride + kh, (wdt - 1) * stride + kw
    out_pad = np.zeros((n, hp, wp, c_out), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out_pad[:, ki: ki + stride * h: stride,
                    kj: kj + stride * wdt: stride, :] += x @ w[ki, kj]
    out = out_pad[:, p: p + stride * h, p: p + stride * wdt, :] + b
    return out, (x, w, stride)


def conv2d_transpose_backward(dout, cache):
    x, w, stride = cache
    kh, kw, c_in, c_out = w.shape
    n, h, wdt = x.shape[:3]
    p = stride // 2
    hp, wp = (h - 1) * stride + kh, (wdt - 1) * stride + kw
    dout_pad = np.zeros((n, hp, wp, c_out), dtype=dout.dtype)
    dout_pad[:, p: p + stride * h, p: p + stride * wdt, :] = dout
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for ki in range(kh):
        for kj in range(kw):
            sl = dout_pad[:, ki: ki + stride * h: stride,
                          kj: kj + stride * wdt: stride, :]
            dx += sl @ w[ki, kj].T
            dw[ki, kj] = np.tensordot(x, sl, axes=([0, 1, 2], [0, 1, 2]))
    db = dout.sum(axis=(0, 1, 2))
    return dx, dw, db


def maxpool2x2(x):
    """2x2/stride-2 max pooling, ceil mode: odd edges padded with -inf."""
    n, h, w, c = x.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        x_pad = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)),
                       constant_values=-np.inf)
    else:
        x_pad = x
    h2, w2 = x_pad.shape[1] // 2, x_pad.shape[2] // 2
    win = x_pad.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2x2_backward(dout, cache):
    (n, h, w, c), idx = cache
    h2, w2 = idx.shape[1], idx.shape[2]
    dwin = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx_pad = dwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    return dx_pad[:, :h, :w, :]


def upsample_nn2x(x):
    out = x.repeat(2, axis=1).repeat(2, axis=2)
    return out, x.shape


def upsample_nn2x_backward(dout, cache):
    n, h, w, c = cache
    return dout.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))


def crop_to(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Trim the bottom/right ceil-padding excess so branch sizes agree."""
    return x[:, :h, :w, :]


def concat_channels(a, b):
    h = min(a.shape[1], b.shape[1])
    w = min(a.shape[2], b.shape[2])
    out = np.concatenate([crop_to(a, h, w), crop_to(b, h, w)], axis=3)
    return out, (a.shape, b.shape, h, w)


def concat_channels_backward(dout, cache):
    a_shape, b_shape, h, w = cache
    ca = a_shape[3]
    da = np.zeros(a_shape, dtype=dout.dtype)
    db = np.zeros(b_shape, dtype=dout.dtype)
    da[:, :h, :w, :] = dout[..., :ca]
    db[:, :h, :w, :] = dout[..., ca:]
    return da, db


def add_fuse(a, b):
    if a.shape[3] != b.shape[3]:
        raise ValueError("additive fusion needs equal channel counts")
    h = min(a.shape[1], b.shape[1])
    w = min(a.shape[2], b.shape[2])
    return crop_to(a, h, w) + crop_to(b, h, w), (a.shape, b.shape, h, w)


def add_fuse_backward(dout, cache):
    a_shape, b_shape, h, w = cache
    da = np.zeros(a_shape, dtype=dout.dtype)
    db = np.zeros(b_shape, dtype=dout.dtype)
    da[:, :h, :w, :] = dout
    db[:, :h, :w, :] = dout
    return da, db


def dense(x, w, b):
    """Affine layer; implicitly flattens non-2D inputs row-major."""
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != w.shape[0]:
        raise ValueError(f"dense expects {w.shape[0]} features, got {x2.shape[1]}")
    return x2 @ w + b, (x.shape, x2, w)


def dense_backward(dout, cache):
    x_shape, x2, w = cache
    dw = x2.T @ dout
    db = dout.sum(axis=0)
    dx = (dout @ w.T).reshape(x_shape)
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def leaky_relu(x, alpha: float = 0.2):
    return np.where(x > 0, x, alpha * x), (x, alpha)


def leaky_relu_backward(dout, cache):
    x, alpha = cache
    return dout * np.where(x > 0, 1.0, alpha).astype(dout.dtype)


def softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def softmax_backward(dout, cache):
    p = cache
    return p * (dout - (p * dout).sum(axis=-1, keepdims=True))
