"""Differentiable volumetric layers.

All spatial tensors are ``[N, C, D, H, W]``. Convolutions are computed as a
column gather (``kernels.im2col``) followed by one BLAS matrix product; the
transposed convolution runs the same pair of kernels in the opposite order.
"""

import numpy as np

from .. import kernels
from .tensor import Tensor, make_result

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _check_5d(x, what):
    if x.data.ndim != 5:
        raise ValueError(f"{what} expects a [N, C, D, H, W] tensor, got shape {x.shape}")


def _channels_last(arr):
    """[N, C, D, H, W] -> [N*D*H*W, C] (copy)."""
    n, c = arr.shape[:2]
    return np.ascontiguousarray(np.moveaxis(arr, 1, -1)).reshape(-1, c)


def _channels_first(rows, n, spatial):
    """[N*D*H*W, C] -> [N, C, D, H, W] (copy)."""
    c = rows.shape[1]
    return np.ascontiguousarray(np.moveaxis(rows.reshape(n, *spatial, c), -1, 1))


def conv3d(x, w, b):
    """3x3x3 convolution, stride 1, zero padding 1 (shape preserving)."""
    _check_5d(x, "conv3d")
    n, c, d, h, wd = x.shape
    k_out = w.shape[0]
    if w.shape != (k_out, c, 3, 3, 3):
        raise ValueError(f"conv3d weight {w.shape} does not match {c} input channels")
    if b.shape != (k_out,):
        raise ValueError(f"conv3d bias {b.shape} does not match {k_out} output channels")
    if min(d, h, wd) < 1:
        raise ValueError("conv3d needs spatial extents >= 1")

    cols = kernels.im2col(np.ascontiguousarray(x.data), 3, 1, 1)
    w2 = w.data.reshape(k_out, c * 27)
    rows = cols @ w2.T
    rows += b.data
    out = _channels_first(rows, n, (d, h, wd))

    def backward(g):
        g_rows = _channels_last(g)
        if w.requires_grad:
            w._accumulate((cols.T @ g_rows).T.reshape(w.shape))
        if b.requires_grad:
            b._accumulate(g_rows.sum(axis=0))
        if x.requires_grad:
            x._accumulate(kernels.col2im(g_rows @ w2, x.shape, 3, 1, 1))

    return make_result(out, (x, w, b), backward)


def deconv3d(x, w, b):
    """Transposed convolution, 4x4x4 kernel, stride 2, padding 1 (doubles each extent).

    ``w`` is laid out ``[C_in, C_out, 4, 4, 4]``.
    """
    _check_5d(x, "deconv3d")
    n, c, d, h, wd = x.shape
    if w.data.ndim != 5 or w.shape[0] != c or w.shape[2:] != (4, 4, 4):
        raise ValueError(f"deconv3d weight {w.shape} does not match {c} input channels")
    k_out = w.shape[1]
    if b.shape != (k_out,):
        raise ValueError(f"deconv3d bias {b.shape} does not match {k_out} output channels")

    out_shape = (n, k_out, 2 * d, 2 * h, 2 * wd)
    x_rows = _channels_last(x.data)
    w2 = w.data.reshape(c, k_out * 64)
    out = kernels.col2im(x_rows @ w2, out_shape, 4, 2, 1)
    out += b.data.reshape(1, k_out, 1, 1, 1)

    def backward(g):
        g_cols = kernels.im2col(np.ascontiguousarray(g), 4, 2, 1)
        if w.requires_grad:
            w._accumulate((x_rows.T @ g_cols).reshape(w.shape))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            x._accumulate(_channels_first(g_cols @ w2.T, n, (d, h, wd)))

    return make_result(out, (x, w, b), backward)


def maxpool3d(x):
    """2x2x2 max pooling, stride 2; ties route the gradient to the first voxel in scan order."""
    _check_5d(x, "maxpool3d")
    if any(s % 2 for s in x.shape[2:]):
        raise ValueError(f"maxpool3d needs even spatial extents, got {x.shape[2:]}")
    out, arg = kernels.maxpool2_forward(np.ascontiguousarray(x.data))

    def backward(g):
        x._accumulate(kernels.maxpool2_backward(np.ascontiguousarray(g), arg))

    return make_result(out, (x,), backward)


class BatchNormState:
    """Running per-channel statistics for one batch-norm layer."""

    def __init__(self, channels, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = BN_MOMENTUM


def batchnorm(x, gamma, beta, state, training):
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm parameters do not match {c} channels")
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    count = x.data.size // c

    if training:
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        m = state.momentum
        unbiased = var * (count / max(count - 1, 1))
        state.running_mean[:] = (1 - m) * state.running_mean + m * mean
        state.running_var[:] = (1 - m) * state.running_var + m * unbiased
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
        centered = x.data - mean.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data.reshape(bshape)
            if training:
                mean_g = gx.mean(axis=axes).reshape(bshape)
                mean_gx = (gx * xhat).mean(axis=axes).reshape(bshape)
                gx = (gx - mean_g - xhat * mean_gx) * inv_std.reshape(bshape)
            else:
                gx = gx * inv_std.reshape(bshape)
            x._accumulate(gx)

    return make_result(out, (x, gamma, beta), backward)


def relu(x):
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        x._accumulate(g * mask)

    return make_result(out, (x,), backward)


def sigmoid(x):
    out = _sigmoid(x.data)

    def backward(g):
        x._accumulate(g * out * (1 - out))

    return make_result(out, (x,), backward)


def _sigmoid(a):
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax_channels(x):
    out = _softmax(x.data, axis=1)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=1, keepdims=True)))

    return make_result(out, (x,), backward)


def _softmax(a, axis):
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def concat_channels(tensors):
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=1)
    splits = np.cumsum([a.shape[1] for a in arrays])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=1)):
            if t.requires_grad:
                t._accumulate(part)

    return make_result(out, tuple(tensors), backward)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)
