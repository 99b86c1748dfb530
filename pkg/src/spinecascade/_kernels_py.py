"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    do, ho, wo = win.shape[2:5]
    # rows are output voxels, columns are (channel, kd, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
        n * do * ho * wo, c * k**3
    )


def col2im(cols, shape, k, stride, pad):
    n, c, d, h, w = shape
    do, ho, wo = (_out_extent(s, k, stride, pad) for s in (d, h, w))
    if cols.shape != (n * do * ho * wo, c * k**3):
        raise ValueError("column matrix does not match target shape")
    blocks = cols.reshape(n, do, ho, wo, c, k, k, k)
    xp = np.zeros((n, c, d + 2 * pad, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                xp[
                    :,
                    :,
                    kd : kd + stride * do : stride,
                    kh : kh + stride * ho : stride,
                    kw : kw + stride * wo : stride,
                ] += blocks[:, :, :, :, :, kd, kh, kw].transpose(0, 4, 1, 2, 3)
    return np.ascontiguousarray(xp[:, :, pad : pad + d, pad : pad + h, pad : pad + w])


def maxpool2_forward(x):
    n, c, d, h, w = x.shape
    blocks = x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // 2, h // 2, w // 2, 8)
    # argmax returns the first maximum, i.e. first in (dd, dh, dw) scan order
    arg = blocks.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(grad_out, arg):
    n, c, do, ho, wo = grad_out.shape
    blocks = np.zeros((n, c, do, ho, wo, 8), dtype=grad_out.dtype)
    np.put_along_axis(blocks, arg[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    blocks = blocks.reshape(n, c, do, ho, wo, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return np.ascontiguousarray(blocks.reshape(n, c, 2 * do, 2 * ho, 2 * wo))
