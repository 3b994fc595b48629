"""Convolution kernel backend selection.

Two implementations of the same contract:

* ``compiled`` -- Cython direct-loop kernels, used for maps where the
  loop nest beats BLAS (large spatial extent). Small deep maps are
  routed to the im2col/BLAS path even in compiled mode, since a 4^3 map
  with 64 channels is a matmul-shaped problem.
* ``numpy`` -- im2col + BLAS everywhere.

Selection happens at import: the compiled module if it built, else the
numpy fallback. ``ANATOMAP_KERNELS=compiled|numpy|auto`` overrides, and
``ANATOMAP_NUM_THREADS`` caps the OpenMP thread count of the compiled
kernels. Both backends are run-to-run deterministic.
"""

import os

import numpy as np

from . import reference
from .reference import out_shape

try:
    from . import _conv3d
except ImportError:
    _conv3d = None

_choice = os.environ.get("ANATOMAP_KERNELS", "auto").lower()
if _choice not in ("auto", "compiled", "numpy"):
    raise ValueError(f"ANATOMAP_KERNELS must be auto|compiled|numpy, got {_choice!r}")
if _choice == "compiled" and _conv3d is None:
    raise ImportError("ANATOMAP_KERNELS=compiled but the extension is not built")

_USE_COMPILED = _conv3d is not None and _choice != "numpy"

# Below this many output voxels the im2col/BLAS path wins even when the
# extension is available (measured on the network's own layer shapes:
# the 27x gather is cheap for small maps while short inner loops starve
# the direct kernel).
_DIRECT_MIN_VOXELS = 1024


def active_backend():
    return "compiled" if _USE_COMPILED else "numpy"


def _nthreads():
    n = os.environ.get("ANATOMAP_NUM_THREADS")
    if n is not None:
        return max(1, int(n))
    return min(2, os.cpu_count() or 1)


def _use_direct(spatial_out):
    return _USE_COMPILED and int(np.prod(spatial_out)) >= _DIRECT_MIN_VOXELS


def conv3d_forward(x, w, bias, stride=(1, 1, 1), pad=0):
    """Cross-correlate ``x`` (B,Ci,D,H,W) with ``w`` (Co,Ci,kd,kh,kw)."""
    so = out_shape(x.shape[2:], w.shape[2:], stride, pad)
    if not _use_direct(so):
        return reference.conv3d_forward(x, w, bias, stride, pad)
    xp = reference._pad(x, pad)
    out = np.empty((x.shape[0], w.shape[0]) + so, dtype=x.dtype)
    b = bias if bias is not None else np.zeros(w.shape[0], dtype=x.dtype)
    _conv3d.conv3d_fwd(xp, w, b, out, *stride, _nthreads())
    return out


def conv3d_backward_input(gout, w, x_shape, stride=(1, 1, 1), pad=0):
    if not _use_direct(gout.shape[2:]):
        return reference.conv3d_backward_input(gout, w, x_shape, stride, pad)
    B = gout.shape[0]
    padded = tuple(x_shape[i] + 2 * pad for i in range(3))
    gxp = np.zeros((B, w.shape[1]) + padded, dtype=gout.dtype)
    _conv3d.conv3d_bwd_input(gout, w, gxp, *stride, _nthreads())
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, pad:-pad, pad:-pad, pad:-pad])


def conv3d_backward_weight(x, gout, w_shape, stride=(1, 1, 1), pad=0):
    if not _use_direct(gout.shape[2:]):
        return reference.conv3d_backward_weight(x, gout, w_shape, stride, pad)
    xp = reference._pad(x, pad)
    gw = np.zeros(w_shape, dtype=x.dtype)
    scratch = np.zeros((w_shape[0] * w_shape[1], gout.shape[4]), dtype=x.dtype)
    _conv3d.conv3d_bwd_weight(xp, gout, gw, scratch, *stride, _nthreads())
    gb = gout.sum(axis=(0, 2, 3, 4))
    return gw, gb
