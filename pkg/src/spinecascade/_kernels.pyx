# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the volumetric layers.

Same signatures and results as ``_kernels_py``. Arrays are C-contiguous
5-D ``[N, C, D, H, W]`` blocks; column matrices are ``[rows, C*k^3]`` with
one row per output voxel and columns ordered (channel, kd, kh, kw).
"""

import numpy as np

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _out_extent(Py_ssize_t n, int k, int stride, int pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(real[:, :, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Do = _out_extent(D, k, stride, pad)
    cdef Py_ssize_t Ho = _out_extent(H, k, stride, pad)
    cdef Py_ssize_t Wo = _out_extent(W, k, stride, pad)
    cdef Py_ssize_t kk = k * k * k
    dtype = np.float32 if real is float else np.float64
    out = np.empty((N * Do * Ho * Wo, C * kk), dtype=dtype)
    if out.size == 0:
        return out
    cdef real[:, ::1] cols = out
    cdef real* dst = &cols[0, 0]
    cdef const real* src
    cdef const real* line
    cdef Py_ssize_t n, c, od, oh, ow, kd, kh, kw, id_, ih, iw, w0
    cdef Py_ssize_t plane = H * W, volume = D * H * W
    with nogil:
        for n in range(N):
            for od in range(Do):
                for oh in range(Ho):
                    for ow in range(Wo):
                        w0 = ow * stride - pad
                        for c in range(C):
                            src = &x[n, c, 0, 0, 0]
                            for kd in range(k):
                                id_ = od * stride - pad + kd
                                if id_ < 0 or id_ >= D:
                                    for kh in range(k * k):
                                        dst[0] = 0
                                        dst += 1
                                    continue
                                for kh in range(k):
                                    ih = oh * stride - pad + kh
                                    if ih < 0 or ih >= H:
                                        for kw in range(k):
                                            dst[0] = 0
                                            dst += 1
                                        continue
                                    line = src + id_ * plane + ih * W
                                    if w0 >= 0 and w0 + k <= W:
                                        for kw in range(k):
                                            dst[kw] = line[w0 + kw]
                                    else:
                                        for kw in range(k):
                                            iw = w0 + kw
                                            dst[kw] = line[iw] if 0 <= iw < W else 0
                                    dst += k
    return out


def col2im(real[:, ::1] cols, shape, int k, int stride, int pad):
    cdef Py_ssize_t N = shape[0], C = shape[1]
    cdef Py_ssize_t D = shape[2], H = shape[3], W = shape[4]
    cdef Py_ssize_t Do = _out_extent(D, k, stride, pad)
    cdef Py_ssize_t Ho = _out_extent(H, k, stride, pad)
    cdef Py_ssize_t Wo = _out_extent(W, k, stride, pad)
    if cols.shape[0] != N * Do * Ho * Wo or cols.shape[1] != C * k * k * k:
        raise ValueError("column matrix does not match target shape")
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((N, C, D, H, W), dtype=dtype)
    if out.size == 0 or cols.shape[0] == 0:
        return out
    cdef real[:, :, :, :, ::1] x = out
    cdef const real* src = &cols[0, 0]
    cdef real* base
    cdef real* line
    cdef Py_ssize_t n, c, od, oh, ow, kd, kh, kw, id_, ih, iw, w0
    cdef Py_ssize_t plane = H * W
    with nogil:
        for n in range(N):
            for od in range(Do):
                for oh in range(Ho):
                    for ow in range(Wo):
                        w0 = ow * stride - pad
                        for c in range(C):
                            base = &x[n, c, 0, 0, 0]
                            for kd in range(k):
                                id_ = od * stride - pad + kd
                                if id_ < 0 or id_ >= D:
                                    src += k * k
                                    continue
                                for kh in range(k):
                                    ih = oh * stride - pad + kh
                                    if ih < 0 or ih >= H:
                                        src += k
                                        continue
                                    line = base + id_ * plane + ih * W
                                    if w0 >= 0 and w0 + k <= W:
                                        for kw in range(k):
                                            line[w0 + kw] += src[kw]
                                    else:
                                        for kw in range(k):
                                            iw = w0 + kw
                                            if 0 <= iw < W:
                                                line[iw] += src[kw]
                                    src += k
    return out


def maxpool2_forward(real[:, :, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t Do = x.shape[2] // 2, Ho = x.shape[3] // 2, Wo = x.shape[4] // 2
    dtype = np.float32 if real is float else np.float64
    out = np.empty((N, C, Do, Ho, Wo), dtype=dtype)
    arg = np.empty((N, C, Do, Ho, Wo), dtype=np.int8)
    cdef real[:, :, :, :, ::1] y = out
    cdef signed char[:, :, :, :, ::1] a = arg
    cdef Py_ssize_t n, c, od, oh, ow, dd, dh, dw
    cdef signed char best_i, i
    cdef real best, v
    with nogil:
        for n in range(N):
            for c in range(C):
                for od in range(Do):
                    for oh in range(Ho):
                        for ow in range(Wo):
                            best = x[n, c, 2 * od, 2 * oh, 2 * ow]
                            best_i = 0
                            i = 0
                            for dd in range(2):
                                for dh in range(2):
                                    for dw in range(2):
                                        v = x[n, c, 2 * od + dd, 2 * oh + dh, 2 * ow + dw]
                                        if v > best:
                                            best = v
                                            best_i = i
                                        i += 1
                            y[n, c, od, oh, ow] = best
                            a[n, c, od, oh, ow] = best_i
    return out, arg


def maxpool2_backward(real[:, :, :, :, ::1] grad_out, signed char[:, :, :, :, ::1] arg):
    cdef Py_ssize_t N = grad_out.shape[0], C = grad_out.shape[1]
    cdef Py_ssize_t Do = grad_out.shape[2], Ho = grad_out.shape[3], Wo = grad_out.shape[4]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((N, C, 2 * Do, 2 * Ho, 2 * Wo), dtype=dtype)
    cdef real[:, :, :, :, ::1] g = out
    cdef Py_ssize_t n, c, od, oh, ow
    cdef int i
    with nogil:
        for n in range(N):
            for c in range(C):
                for od in range(Do):
                    for oh in range(Ho):
                        for ow in range(Wo):
                            i = arg[n, c, od, oh, ow]
                            g[n, c, 2 * od + (i >> 2), 2 * oh + ((i >> 1) & 1), 2 * ow + (i & 1)] = grad_out[n, c, od, oh, ow]
    return out
