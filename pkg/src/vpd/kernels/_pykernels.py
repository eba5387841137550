"""NumPy implementations of the gather/scatter kernels behind convolution.

These are the reference versions. The compiled module mirrors every function
here with the same signature and accumulation order where that is cheap to
guarantee (im2col/col2im are bitwise identical across backends).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def im2col3d(x, ksize, stride, pad):
    """Unfold ``x`` [N, C, D, H, W] into columns [N, C*kd*kh*kw, Do*Ho*Wo]."""
    kd, kh, kw = ksize
    sd, sh, sw = stride
    pd, ph, pw = pad
    n, c = x.shape[:2]
    if pd or ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]
    do, ho, wo = win.shape[2:5]
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    return np.ascontiguousarray(cols).reshape(n, c * kd * kh * kw, do * ho * wo)


def col2im3d(cols, x_shape, ksize, stride, pad):
    """Adjoint of :func:`im2col3d`: scatter-add columns back onto the input grid."""
    n, c, d, h, w = x_shape
    kd, kh, kw = ksize
    sd, sh, sw = stride
    pd, ph, pw = pad
    do = conv_out_size(d, kd, sd, pd)
    ho = conv_out_size(h, kh, sh, ph)
    wo = conv_out_size(w, kw, sw, pw)
    cols = cols.reshape(n, c, kd, kh, kw, do, ho, wo)
    dxp = np.zeros((n, c, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                dxp[:, :,
                    a:a + sd * (do - 1) + 1:sd,
                    b:b + sh * (ho - 1) + 1:sh,
                    e:e + sw * (wo - 1) + 1:sw] += cols[:, :, a, b, e]
    return np.ascontiguousarray(dxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w])


def _sample_grid(x_shape, offsets, k, pad, stride):
    h, w = x_shape[1:]
    ho, wo = offsets.shape[1:]
    tap_y = np.repeat(np.arange(k), k).astype(offsets.dtype)
    tap_x = np.tile(np.arange(k), k).astype(offsets.dtype)
    base_y = (np.arange(ho) * stride - pad).astype(offsets.dtype)
    base_x = (np.arange(wo) * stride - pad).astype(offsets.dtype)
    py = base_y[None, :, None] + tap_y[:, None, None] + offsets[0::2]
    px = base_x[None, None, :] + tap_x[:, None, None] + offsets[1::2]
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yc = y0 + dy
        xc = x0 + dx
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        flat = np.where(valid, np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1), 0)
        corners.append((flat, valid))
    return ly, lx, corners


def _gather_corners(x, corners):
    c = x.shape[0]
    xf = x.reshape(c, -1)
    vals = []
    for flat, valid in corners:
        v = xf[:, flat]
        vals.append(np.where(valid[None], v, 0).astype(x.dtype, copy=False))
    return vals


def deform_im2col(x, offsets, k, pad, stride=1):
    """Bilinearly sample ``x`` [C, H, W] at kernel taps shifted by ``offsets``.

    ``offsets`` is [2*k*k, Ho, Wo] with (dy, dx) interleaved per tap. Samples
    falling outside the image read zero. Returns columns [C*k*k, Ho*Wo].
    """
    c = x.shape[0]
    ly, lx, corners = _sample_grid(x.shape, offsets, k, pad, stride)
    v00, v01, v10, v11 = _gather_corners(x, corners)
    w00 = (1 - ly) * (1 - lx)
    w01 = (1 - ly) * lx
    w10 = ly * (1 - lx)
    w11 = ly * lx
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    return out.reshape(c * k * k, -1)


def deform_col2im(dcols, x, offsets, k, pad, stride=1):
    """Gradients of :func:`deform_im2col` w.r.t. ``x`` and ``offsets``."""
    c, h, w = x.shape
    kk = k * k
    ly, lx, corners = _sample_grid(x.shape, offsets, k, pad, stride)
    g = dcols.reshape(c, kk, *offsets.shape[1:])
    v00, v01, v10, v11 = _gather_corners(x, corners)
    weights = ((1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx)

    dx = np.zeros(c * h * w, dtype=x.dtype)
    chan = (np.arange(c) * (h * w))[:, None, None, None]
    for (flat, valid), wgt in zip(corners, weights):
        contrib = g * wgt[None]
        idx = np.broadcast_to(flat[None] + chan, contrib.shape)
        m = np.broadcast_to(valid[None], contrib.shape)
        dx += np.bincount(idx[m], weights=contrib[m], minlength=c * h * w).astype(x.dtype)

    dpy = (1 - lx) * (v10 - v00) + lx * (v11 - v01)
    dpx = (1 - ly) * (v01 - v00) + ly * (v11 - v10)
    doff = np.empty_like(offsets)
    doff[0::2] = (g * dpy).sum(axis=0)
    doff[1::2] = (g * dpx).sum(axis=0)
    return dx.reshape(c, h, w), doff
