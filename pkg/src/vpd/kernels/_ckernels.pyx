# cython: language_level=3
"""Compiled gather/scatter kernels; same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor

cnp.import_array()


cdef inline Py_ssize_t _out(Py_ssize_t n, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p) noexcept nogil:
    return (n + 2 * p - k) // s + 1


cdef inline Py_ssize_t _ceil_div(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    # b > 0; Python-style floor on negatives is not guaranteed in C
    if a >= 0:
        return (a + b - 1) // b
    return -((-a) // b)


def _im2col3d(floating[:, :, :, :, ::1] x, floating[:, :, ::1] cols,
              int kd, int kh, int kw, int sd, int sh, int sw,
              int pd, int ph, int pw):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Do = _out(D, kd, sd, pd), Ho = _out(H, kh, sh, ph), Wo = _out(W, kw, sw, pw)
    cdef Py_ssize_t n, c, a, b, e, od, oh, ow, row, col, zd, zh, lo, hi
    with nogil:
        for n in range(N):
            for c in range(C):
                for a in range(kd):
                    for b in range(kh):
                        for e in range(kw):
                            row = ((c * kd + a) * kh + b) * kw + e
                            # valid ow range: 0 <= ow*sw - pw + e < W
                            lo = _ceil_div(pw - e, sw)
                            if lo < 0:
                                lo = 0
                            hi = _ceil_div(W + pw - e, sw)
                            if hi > Wo:
                                hi = Wo
                            col = 0
                            for od in range(Do):
                                zd = od * sd - pd + a
                                for oh in range(Ho):
                                    zh = oh * sh - ph + b
                                    if zd < 0 or zd >= D or zh < 0 or zh >= H:
                                        for ow in range(Wo):
                                            cols[n, row, col + ow] = 0
                                    else:
                                        for ow in range(lo):
                                            cols[n, row, col + ow] = 0
                                        for ow in range(lo, hi):
                                            cols[n, row, col + ow] = x[n, c, zd, zh, ow * sw - pw + e]
                                        for ow in range(hi, Wo):
                                            cols[n, row, col + ow] = 0
                                    col = col + Wo


def im2col3d(x, ksize, stride, pad):
    x = np.ascontiguousarray(x)
    kd, kh, kw = ksize
    sd, sh, sw = stride
    pd, ph, pw = pad
    n, c, d, h, w = x.shape
    p = _out(d, kd, sd, pd) * _out(h, kh, sh, ph) * _out(w, kw, sw, pw)
    cols = np.empty((n, c * kd * kh * kw, p), dtype=x.dtype)
    _im2col3d(x, cols, kd, kh, kw, sd, sh, sw, pd, ph, pw)
    return cols


def _col2im3d(floating[:, :, ::1] cols, floating[:, :, :, :, ::1] dx,
              int kd, int kh, int kw, int sd, int sh, int sw,
              int pd, int ph, int pw):
    cdef Py_ssize_t N = dx.shape[0], C = dx.shape[1]
    cdef Py_ssize_t D = dx.shape[2], H = dx.shape[3], W = dx.shape[4]
    cdef Py_ssize_t Do = _out(D, kd, sd, pd), Ho = _out(H, kh, sh, ph), Wo = _out(W, kw, sw, pw)
    cdef Py_ssize_t n, c, a, b, e, od, oh, ow, row, col, zd, zh, lo, hi
    with nogil:
        for n in range(N):
            for c in range(C):
                for a in range(kd):
                    for b in range(kh):
                        for e in range(kw):
                            row = ((c * kd + a) * kh + b) * kw + e
                            lo = _ceil_div(pw - e, sw)
                            if lo < 0:
                                lo = 0
                            hi = _ceil_div(W + pw - e, sw)
                            if hi > Wo:
                                hi = Wo
                            col = 0
                            for od in range(Do):
                                zd = od * sd - pd + a
                                for oh in range(Ho):
                                    zh = oh * sh - ph + b
                                    if 0 <= zd < D and 0 <= zh < H:
                                        for ow in range(lo, hi):
                                            dx[n, c, zd, zh, ow * sw - pw + e] += cols[n, row, col + ow]
                                    col = col + Wo


def col2im3d(cols, x_shape, ksize, stride, pad):
    cols = np.ascontiguousarray(cols)
    kd, kh, kw = ksize
    sd, sh, sw = stride
    pd, ph, pw = pad
    n, c, d, h, w = x_shape
    p = _out(d, kd, sd, pd) * _out(h, kh, sh, ph) * _out(w, kw, sw, pw)
    cols = cols.reshape(n, c * kd * kh * kw, p)
    dx = np.zeros(tuple(x_shape), dtype=cols.dtype)
    _col2im3d(cols, dx, kd, kh, kw, sd, sh, sw, pd, ph, pw)
    return dx


cdef inline floating _at(floating[:, :, ::1] x, Py_ssize_t c, Py_ssize_t y, Py_ssize_t z) noexcept nogil:
    if 0 <= y < x.shape[1] and 0 <= z < x.shape[2]:
        return x[c, y, z]
    return 0


def _deform_im2col(floating[:, :, ::1] x, floating[:, :, ::1] off, floating[:, ::1] cols,
                   int k, int pad, int stride):
    cdef Py_ssize_t C = x.shape[0], Ho = off.shape[1], Wo = off.shape[2]
    cdef Py_ssize_t c, t, oh, ow, y0, x0, row
    cdef floating py, px, ly, lx, v00, v01, v10, v11
    with nogil:
        for c in range(C):
            for t in range(k * k):
                row = c * k * k + t
                for oh in range(Ho):
                    for ow in range(Wo):
                        py = oh * stride - pad + t // k + off[2 * t, oh, ow]
                        px = ow * stride - pad + t % k + off[2 * t + 1, oh, ow]
                        y0 = <Py_ssize_t>floor(py)
                        x0 = <Py_ssize_t>floor(px)
                        ly = py - y0
                        lx = px - x0
                        v00 = _at(x, c, y0, x0)
                        v01 = _at(x, c, y0, x0 + 1)
                        v10 = _at(x, c, y0 + 1, x0)
                        v11 = _at(x, c, y0 + 1, x0 + 1)
                        cols[row, oh * Wo + ow] = ((1 - ly) * (1 - lx) * v00 + (1 - ly) * lx * v01
                                                   + ly * (1 - lx) * v10 + ly * lx * v11)


def deform_im2col(x, offsets, k, pad, stride=1):
    x = np.ascontiguousarray(x)
    offsets = np.ascontiguousarray(offsets, dtype=x.dtype)
    c = x.shape[0]
    cols = np.empty((c * k * k, offsets.shape[1] * offsets.shape[2]), dtype=x.dtype)
    _deform_im2col(x, offsets, cols, k, pad, stride)
    return cols


cdef inline void _put(floating[:, :, ::1] dx, Py_ssize_t c, Py_ssize_t y, Py_ssize_t z,
                      floating v) noexcept nogil:
    if 0 <= y < dx.shape[1] and 0 <= z < dx.shape[2]:
        dx[c, y, z] += v


def _deform_col2im(floating[:, ::1] g, floating[:, :, ::1] x, floating[:, :, ::1] off,
                   floating[:, :, ::1] dx, floating[:, :, ::1] doff,
                   int k, int pad, int stride):
    cdef Py_ssize_t C = x.shape[0], Ho = off.shape[1], Wo = off.shape[2]
    cdef Py_ssize_t c, t, oh, ow, y0, x0, row
    cdef floating py, px, ly, lx, v00, v01, v10, v11, gv
    with nogil:
        for c in range(C):
            for t in range(k * k):
                row = c * k * k + t
                for oh in range(Ho):
                    for ow in range(Wo):
                        gv = g[row, oh * Wo + ow]
                        py = oh * stride - pad + t // k + off[2 * t, oh, ow]
                        px = ow * stride - pad + t % k + off[2 * t + 1, oh, ow]
                        y0 = <Py_ssize_t>floor(py)
                        x0 = <Py_ssize_t>floor(px)
                        ly = py - y0
                        lx = px - x0
                        _put(dx, c, y0, x0, gv * (1 - ly) * (1 - lx))
                        _put(dx, c, y0, x0 + 1, gv * (1 - ly) * lx)
                        _put(dx, c, y0 + 1, x0, gv * ly * (1 - lx))
                        _put(dx, c, y0 + 1, x0 + 1, gv * ly * lx)
                        v00 = _at(x, c, y0, x0)
                        v01 = _at(x, c, y0, x0 + 1)
                        v10 = _at(x, c, y0 + 1, x0)
                        v11 = _at(x, c, y0 + 1, x0 + 1)
                        doff[2 * t, oh, ow] += gv * ((1 - lx) * (v10 - v00) + lx * (v11 - v01))
                        doff[2 * t + 1, oh, ow] += gv * ((1 - ly) * (v01 - v00) + ly * (v11 - v10))


def deform_col2im(dcols, x, offsets, k, pad, stride=1):
    x = np.ascontiguousarray(x)
    offsets = np.ascontiguousarray(offsets, dtype=x.dtype)
    g = np.ascontiguousarray(dcols, dtype=x.dtype).reshape(x.shape[0] * k * k, -1)
    dx = np.zeros_like(x)
    doff = np.zeros_like(offsets)
    _deform_col2im(g, x, offsets, dx, doff, k, pad, stride)
    return dx, doff
