# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Direct 3D cross-correlation kernels (forward, input grad, weight grad).

Inputs arrive pre-padded; strides are explicit. Parallel loops partition
work over disjoint output slabs, so accumulation order per element is
fixed and results are bitwise reproducible at any thread count.
"""

import numpy as np

from cython.parallel cimport prange

ctypedef fused real:
    float
    double


def conv3d_fwd(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] w,
               real[::1] bias, real[:, :, :, :, ::1] out,
               int sz, int sy, int sx, int num_threads):
    cdef Py_ssize_t B = out.shape[0], Co = out.shape[1]
    cdef Py_ssize_t D = out.shape[2], H = out.shape[3], W = out.shape[4]
    cdef Py_ssize_t Ci = xp.shape[1]
    cdef Py_ssize_t kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t bc, b, co, ci, kz, ky, kx, z, y, x, zb, yb
    cdef real wv

    for bc in prange(B * Co, nogil=True, schedule='static', num_threads=num_threads):
        b = bc // Co
        co = bc % Co
        for z in range(D):
            for y in range(H):
                for x in range(W):
                    out[b, co, z, y, x] = bias[co]
        for ci in range(Ci):
            for kz in range(kd):
                for ky in range(kh):
                    for kx in range(kw):
                        wv = w[co, ci, kz, ky, kx]
                        if sz == 1 and sy == 1 and sx == 1:
                            for z in range(D):
                                for y in range(H):
                                    for x in range(W):
                                        out[b, co, z, y, x] = out[b, co, z, y, x] + \
                                            wv * xp[b, ci, z + kz, y + ky, x + kx]
                        else:
                            for z in range(D):
                                zb = z * sz + kz
                                for y in range(H):
                                    yb = y * sy + ky
                                    for x in range(W):
                                        out[b, co, z, y, x] = out[b, co, z, y, x] + \
                                            wv * xp[b, ci, zb, yb, x * sx + kx]


def conv3d_bwd_input(real[:, :, :, :, ::1] gout, real[:, :, :, :, ::1] w,
                     real[:, :, :, :, ::1] gxp,
                     int sz, int sy, int sx, int num_threads):
    """Accumulate input gradient into the zero-initialized padded buffer."""
    cdef Py_ssize_t B = gout.shape[0], Co = gout.shape[1]
    cdef Py_ssize_t D = gout.shape[2], H = gout.shape[3], W = gout.shape[4]
    cdef Py_ssize_t Ci = gxp.shape[1]
    cdef Py_ssize_t kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t bc, b, ci, co, kz, ky, kx, z, y, x, zb, yb
    cdef real wv

    for bc in prange(B * Ci, nogil=True, schedule='static', num_threads=num_threads):
        b = bc // Ci
        ci = bc % Ci
        for co in range(Co):
            for kz in range(kd):
                for ky in range(kh):
                    for kx in range(kw):
                        wv = w[co, ci, kz, ky, kx]
                        if sz == 1 and sy == 1 and sx == 1:
                            for z in range(D):
                                for y in range(H):
                                    for x in range(W):
                                        gxp[b, ci, z + kz, y + ky, x + kx] = \
                                            gxp[b, ci, z + kz, y + ky, x + kx] + \
                                            wv * gout[b, co, z, y, x]
                        else:
                            for z in range(D):
                                zb = z * sz + kz
                                for y in range(H):
                                    yb = y * sy + ky
                                    for x in range(W):
                                        gxp[b, ci, zb, yb, x * sx + kx] = \
                                            gxp[b, ci, zb, yb, x * sx + kx] + \
                                            wv * gout[b, co, z, y, x]


def conv3d_bwd_weight(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] gout,
                      real[:, :, :, :, ::1] gw, real[:, ::1] scratch,
                      int sz, int sy, int sx, int num_threads):
    # scratch is (Co*Ci, W): a per-task lane accumulator. Accumulating
    # lanewise keeps the inner loop an elementwise FMA (vectorizable
    # under strict FP semantics); the horizontal sum happens once per
    # kernel tap in fixed order, so results stay bitwise reproducible.
    cdef Py_ssize_t B = gout.shape[0], Co = gout.shape[1]
    cdef Py_ssize_t D = gout.shape[2], H = gout.shape[3], W = gout.shape[4]
    cdef Py_ssize_t Ci = xp.shape[1]
    cdef Py_ssize_t kd = gw.shape[2], kh = gw.shape[3], kw = gw.shape[4]
    cdef Py_ssize_t cc, co, ci, kz, ky, kx, b, z, y, x, zb, yb
    cdef real acc

    for cc in prange(Co * Ci, nogil=True, schedule='static', num_threads=num_threads):
        co = cc // Ci
        ci = cc % Ci
        for kz in range(kd):
            for ky in range(kh):
                for kx in range(kw):
                    for x in range(W):
                        scratch[cc, x] = 0
                    if sz == 1 and sy == 1 and sx == 1:
                        for b in range(B):
                            for z in range(D):
                                for y in range(H):
                                    for x in range(W):
                                        scratch[cc, x] = scratch[cc, x] + \
                                            gout[b, co, z, y, x] * \
                                            xp[b, ci, z + kz, y + ky, x + kx]
                    else:
                        for b in range(B):
                            for z in range(D):
                                zb = z * sz + kz
                                for y in range(H):
                                    yb = y * sy + ky
                                    for x in range(W):
                                        scratch[cc, x] = scratch[cc, x] + \
                                            gout[b, co, z, y, x] * \
                                            xp[b, ci, zb, yb, x * sx + kx]
                    acc = 0
                    for x in range(W):
                        acc = acc + scratch[cc, x]
                    gw[co, ci, kz, ky, kx] = acc
