"""Minimal reverse-mode autodiff over numpy arrays.

The op set is exactly what the localization network and its two losses
need: 3D convolution, stride-2 average pooling, nearest upsampling,
fully connected layers, pointwise nonlinearities, per-voxel channel
normalization, spatial softmax, and the gather/dot primitives used by
feature matching. Gradients are exact; every op is checked against
central finite differences in the test suite.

Values are float32 by default; float64 flows through unchanged (the
gradient-check harness runs in float64, where the finite-difference
oracle is meaningful).
"""

import numpy as np

from .. import errors
from . import kernels

EPS_NORM = 1e-8


class Tensor:
    """A numpy array plus gradient buffer and backprop closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def ensure_grad(self):
        """Gradient buffer for ops that scatter into a slice in place."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from a scalar tensor through the recorded graph."""
        if self.data.shape != ():
            raise errors.ShapeMismatch("backward() requires a scalar tensor")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unary(x, out_data, grad_fn):
    def bwd(g):
        x.accumulate(grad_fn(g))
    return Tensor(out_data, parents=(x,), backward=bwd)


# -- arithmetic --------------------------------------------------------

def add(a, b):
    b = _as_tensor(b, a)
    if a.data.shape != b.data.shape and b.data.shape != ():
        raise errors.ShapeMismatch(f"add: {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        a.accumulate(g)
        b.accumulate(g.sum() if b.data.shape == () else g)

    return Tensor(a.data + b.data, parents=(a, b), backward=bwd)


def sub(a, b):
    b = _as_tensor(b, a)
    if a.data.shape != b.data.shape and b.data.shape != ():
        raise errors.ShapeMismatch(f"sub: {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        a.accumulate(g)
        b.accumulate(-(g.sum() if b.data.shape == () else g))

    return Tensor(a.data - b.data, parents=(a, b), backward=bwd)


def mul(a, b):
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise errors.ShapeMismatch(f"mul: {a.data.shape} vs {b.data.shape}")

        def bwd(g):
            a.accumulate(g * b.data)
            b.accumulate(g * a.data)

        return Tensor(a.data * b.data, parents=(a, b), backward=bwd)
    c = np.asarray(b, dtype=a.dtype)
    return _unary(a, a.data * c, lambda g: g * c)


def square(x):
    return _unary(x, x.data * x.data, lambda g: g * 2.0 * x.data)


def tsum(x):
    return _unary(x, x.data.sum(dtype=np.float64).astype(x.dtype),
                  lambda g: np.full_like(x.data, g))


def mean(x):
    n = x.data.size
    return _unary(x, (x.data.sum(dtype=np.float64) / n).astype(x.dtype),
                  lambda g: np.full_like(x.data, g / n))


def log(x):
    return _unary(x, np.log(x.data), lambda g: g / x.data)


def clip(x, lo, hi):
    """Clamp values; gradient passes only where unclamped."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)
    return _unary(x, out, lambda g: g * inside)


def relu(x):
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0), lambda g: g * mask)


def tanh(x):
    out = np.tanh(x.data)
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def take_rows(x, idx):
    """Gather rows of a 2D tensor; backward scatters with accumulation."""
    idx = np.asarray(idx, dtype=np.intp)

    def grad(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return gx

    return _unary(x, x.data[idx], grad)


def pick(x, flat_index):
    """Scalar element of a tensor by flat index."""
    i = int(flat_index)

    def grad(g):
        gx = np.zeros_like(x.data)
        gx.reshape(-1)[i] = g
        return gx

    return _unary(x, x.data.reshape(-1)[i].copy(), grad)


# -- network layers ----------------------------------------------------

def conv3d(x, w, b, stride=1, pad=0):
    """3D cross-correlation of (B,Ci,D,H,W) with (Co,Ci,kd,kh,kw)."""
    if isinstance(stride, int):
        stride = (stride, stride, stride)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise errors.ShapeMismatch("conv3d expects 5D input and kernel")
    if x.data.shape[1] != w.data.shape[1]:
        raise errors.ShapeMismatch(
            f"conv3d: input channels {x.data.shape[1]} != kernel {w.data.shape[1]}")
    for i in range(3):
        if x.data.shape[2 + i] + 2 * pad < w.data.shape[2 + i]:
            raise errors.ShapeMismatch("conv3d: kernel larger than padded input")
    out = kernels.conv3d_forward(x.data, w.data, b.data if b is not None else None,
                                 stride, pad)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x.accumulate(kernels.conv3d_backward_input(
                g, w.data, x.data.shape[2:], stride, pad))
        if w.requires_grad or (b is not None and b.requires_grad):
            gw, gb = kernels.conv3d_backward_weight(
                x.data, g, w.data.shape, stride, pad)
            if w.requires_grad:
                w.accumulate(gw)
            if b is not None and b.requires_grad:
                b.accumulate(gb)

    return Tensor(out, parents=parents, backward=bwd)


def linear(x, w, b):
    """Fully connected layer: (B,F) @ (Co,F)^T + (Co,)."""
    if x.data.shape[1] != w.data.shape[1]:
        raise errors.ShapeMismatch(
            f"linear: features {x.data.shape[1]} != weight {w.data.shape[1]}")
    out = x.data @ w.data.T + b.data

    def bwd(g):
        x.accumulate(g @ w.data)
        w.accumulate(g.T @ x.data)
        b.accumulate(g.sum(axis=0))

    return Tensor(out, parents=(x, w, b), backward=bwd)


def avg_pool2(x):
    """Stride-2 average pooling over the spatial axes; dims must be even."""
    B, C, D, H, W = x.data.shape
    if D % 2 or H % 2 or W % 2:
        raise errors.ShapeMismatch(f"avg_pool2 needs even spatial dims, got {(D, H, W)}")
    r = x.data.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2)
    out = r.mean(axis=(3, 5, 7))

    def grad(g):
        ge = g[:, :, :, None, :, None, :, None] / 8.0
        return np.broadcast_to(ge, (B, C, D // 2, 2, H // 2, 2, W // 2, 2)) \
            .reshape(B, C, D, H, W).copy()

    return _unary(x, out, grad)


def upsample_nearest2(x):
    """Nearest-neighbor 2x upsampling over the spatial axes."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    def grad(g):
        B, C, D, H, W = x.data.shape
        return g.reshape(B, C, D, 2, H, 2, W, 2).sum(axis=(3, 5, 7))

    return _unary(x, out, grad)


def global_mean_spatial(x):
    """Mean over the spatial axes: (B,C,D,H,W) -> (B,C)."""
    n = np.prod(x.data.shape[2:])
    out = x.data.mean(axis=(2, 3, 4))

    def grad(g):
        return np.broadcast_to(g[:, :, None, None, None] / n, x.data.shape).copy()

    return _unary(x, out, grad)


def l2_normalize_channels(x, eps=EPS_NORM):
    """Scale each spatial location's channel vector to unit L2 norm.

    Zero vectors map to zero: the norm is floored at ``eps`` so the
    division is total.
    """
    n = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    d = np.maximum(n, eps)
    out = x.data / d

    def grad(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        gx = (g - out * dot) / d
        # below the floor the map is x/eps, a plain scaling
        gx = np.where(n > eps, gx, g / d)
        return gx

    return _unary(x, out, grad)


def softmax_spatial(x):
    """Softmax over all elements of a map (max-subtracted for stability)."""
    flat = x.data.reshape(-1)
    e = np.exp(flat - flat.max())
    s = (e / e.sum()).reshape(x.data.shape)

    def grad(g):
        dot = float((g * s).sum())
        return s * (g - dot)

    return _unary(x, s, grad)


def gather_voxel(x, b, idx):
    """Channel vector at one voxel of a (B,C,D,H,W) map -> (C,)."""
    z, y, xx = (int(v) for v in idx)
    bb = int(b)
    _check_voxel(x.data.shape, (z, y, xx))

    def bwd(g):
        x.ensure_grad()[bb, :, z, y, xx] += g

    return Tensor(x.data[bb, :, z, y, xx].copy(), parents=(x,), backward=bwd)


def channel_dot(vec, fmap, b):
    """Dot a (C,) vector against every location of sample ``b``'s map.

    Equivalent to a 1x1x1 convolution of the map with the vector;
    returns the (D,H,W) similarity map. Both operands receive gradient.
    """
    bb = int(b)
    if vec.data.shape[0] != fmap.data.shape[1]:
        raise errors.ShapeMismatch("channel_dot: channel count mismatch")
    m = fmap.data[bb]
    out = np.tensordot(vec.data, m, axes=([0], [0]))

    def bwd(g):
        if vec.requires_grad:
            vec.accumulate(np.tensordot(m, g, axes=([1, 2, 3], [0, 1, 2])))
        if fmap.requires_grad:
            fmap.ensure_grad()[bb] += vec.data[:, None, None, None] * g

    return Tensor(out, parents=(vec, fmap), backward=bwd)


def _check_voxel(shape, idx):
    for i, v in enumerate(idx):
        if v < 0 or v >= shape[2 + i]:
            raise errors.PointOutsidePatch(f"voxel {idx} outside map {shape[2:]}")
