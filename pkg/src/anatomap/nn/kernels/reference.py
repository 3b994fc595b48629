"""Pure-numpy convolution kernels (im2col + BLAS).

Reference implementation for the compiled extension and the fallback
backend when the extension is unavailable. The gathered column matrix
is laid out K-major, (Ci*kd*kh*kw, B*Do*Ho*Wo), so each direction of
the convolution is a single GEMM over the whole batch.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x, pad):
    if pad == 0:
        return x
    p = ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))
    return np.pad(x, p)


def out_shape(in_shape, kshape, stride, pad):
    return tuple(
        (in_shape[i] + 2 * pad - kshape[i]) // stride[i] + 1 for i in range(3)
    )


def _im2col(x, kshape, stride, pad):
    """Gather windows into a (Ci*k^3, B*n) matrix; returns (col, out spatial)."""
    xp = _pad(x, pad)
    sz, sy, sx = stride
    win = sliding_window_view(xp, kshape, axis=(2, 3, 4))[:, :, ::sz, ::sy, ::sx]
    B, Ci, Do, Ho, Wo = win.shape[:5]
    col = np.ascontiguousarray(win.transpose(1, 5, 6, 7, 0, 2, 3, 4))
    return col.reshape(Ci * np.prod(kshape), B * Do * Ho * Wo), (Do, Ho, Wo)


def _gout2d(gout):
    B, Co = gout.shape[:2]
    return np.ascontiguousarray(gout.transpose(1, 0, 2, 3, 4)).reshape(Co, -1)


def conv3d_forward(x, w, bias, stride, pad):
    col, so = _im2col(x, w.shape[2:], stride, pad)
    B = x.shape[0]
    Co = w.shape[0]
    out = w.reshape(Co, -1) @ col
    if bias is not None:
        out += bias[:, None]
    out = out.reshape(Co, B, *so).transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(out)


def conv3d_backward_weight(x, gout, w_shape, stride, pad):
    col, _ = _im2col(x, w_shape[2:], stride, pad)
    gw = (_gout2d(gout) @ col.T).reshape(w_shape)
    gb = gout.sum(axis=(0, 2, 3, 4))
    return gw, gb


def conv3d_backward_input(gout, w, x_shape, stride, pad):
    B = gout.shape[0]
    Ci = w.shape[1]
    kd, kh, kw = w.shape[2:]
    sz, sy, sx = stride
    Do, Ho, Wo = gout.shape[2:]
    Co = w.shape[0]
    gcol = w.reshape(Co, -1).T @ _gout2d(gout)
    gcol = gcol.reshape(Ci, kd, kh, kw, B, Do, Ho, Wo)
    padded = tuple(x_shape[i] + 2 * pad for i in range(3))
    gxp = np.zeros((B, Ci) + padded, dtype=gout.dtype)
    # scatter one kernel tap at a time; each tap is a strided slab add
    for kz in range(kd):
        for ky in range(kh):
            for kx in range(kw):
                gxp[:, :,
                    kz:kz + Do * sz:sz,
                    ky:ky + Ho * sy:sy,
                    kx:kx + Wo * sx:sx] += gcol[:, kz, ky, kx].transpose(1, 0, 2, 3, 4)
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, pad:-pad, pad:-pad, pad:-pad])
