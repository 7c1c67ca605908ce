"""Dense reverse-mode differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and, when it was produced by one of the
ops below, a closure that maps the output adjoint to the input adjoints.
:func:`backward` walks the graph once in reverse topological order and
leaves ``d(root)/d(leaf)`` in ``leaf.grad`` for every leaf that requires it.

Feature maps use channels-last layout ``(Z, Y, X, C)``; single-channel
volumes are plain ``(Z, Y, X)``.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels

EPS = 1e-8

_default_dtype = np.float32


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new leaf tensors are stored in."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite value in tensor input")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _node(cls, data, parents, backward, op):
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = any(p.requires_grad for p in parents)
        t._parents = parents if t.requires_grad else ()
        t._backward = backward if t.requires_grad else None
        t.op = op
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor._node(self.data, (), None, "detach")

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor._node(np.asarray(x, dtype=dtype), (), None, "const")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._node(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._node(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)
    return Tensor._node(ad * bd, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)
    return Tensor._node(out, (a, b), bw, "div")


def neg(a):
    return Tensor._node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    ad = a.data
    return Tensor._node(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def exp(a):
    out = np.exp(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out,), "exp")


def log(a, eps=EPS):
    """``log(a + eps)``."""
    shifted = a.data + a.data.dtype.type(eps)
    return Tensor._node(np.log(shifted), (a,), lambda g: (g / shifted,), "log")


def abs(a):  # noqa: A001 - mirrors the numpy name
    s = np.sign(a.data)
    return Tensor._node(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def clamp_min(a, lo=0.0):
    keep = a.data > lo
    out = np.where(keep, a.data, a.data.dtype.type(lo))
    return Tensor._node(out, (a,), lambda g: (g * keep,), "clamp_min")


def relu(a):
    return clamp_min(a, 0.0)


def clamp(a, lo, hi):
    keep = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi).astype(a.data.dtype, copy=False)
    return Tensor._node(out, (a,), lambda g: (g * keep,), "clamp")


def sigmoid(a):
    out = expit(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def where(cond, a, b):
    """Select ``a`` where ``cond`` (a constant boolean array) holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(np.where(cond, g, 0), sa),
                _unbroadcast(np.where(cond, 0, g), sb))
    return Tensor._node(np.where(cond, a.data, b.data), (a, b), bw, "where")


# -- reductions ----------------------------------------------------------------

def sum(a):  # noqa: A001
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    shape, dtype = a.shape, a.dtype
    return Tensor._node(out, (a,), lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def mean(a):
    n = a.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype)
    shape, dtype = a.shape, a.dtype
    return Tensor._node(out, (a,), lambda g: (np.full(shape, g / n, dtype=dtype),), "mean")


def _stack_reduce(tensors, maximize):
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"stack_reduce: shape mismatch {shape} vs {t.shape}")
    stacked = np.stack([t.data for t in tensors])
    # argmax/argmin return the first occurrence: ties go to the lowest stack index
    pick = stacked.argmax(axis=0) if maximize else stacked.argmin(axis=0)
    out = np.take_along_axis(stacked, pick[None], axis=0)[0]

    def bw(g):
        return tuple(np.where(pick == i, g, 0).astype(g.dtype, copy=False)
                     for i in range(len(tensors)))
    return Tensor._node(out, tuple(tensors), bw,
                        "stack_reduce_max" if maximize else "stack_reduce_min")


def stack_reduce_max(tensors):
    return _stack_reduce(tensors, True)


def stack_reduce_min(tensors):
    return _stack_reduce(tensors, False)


def maximum(a, b):
    return _stack_reduce([a, b], True)


# -- spatial -------------------------------------------------------------------

def spatial_gradient_l1(a):
    """Per-voxel sum of absolute forward differences along z, y, x.

    The difference across the far boundary of each axis is taken as zero.
    """
    x = a.data
    if x.ndim != 3:
        raise ValueError(f"spatial_gradient_l1 expects a (Z, Y, X) volume, got {x.shape}")
    out = np.zeros_like(x)
    signs = []
    for ax in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        d = x[tuple(hi)] - x[tuple(lo)]
        out[tuple(lo)] += np.abs(d)
        signs.append((tuple(lo), tuple(hi), np.sign(d)))

    def bw(g):
        gx = np.zeros_like(g)
        for lo, hi, s in signs:
            part = g[lo] * s
            gx[hi] += part
            gx[lo] -= part
        return (gx,)
    return Tensor._node(out, (a,), bw, "spatial_gradient_l1")


def morph_reduce(a, offsets, inner_max, outer_max):
    """Two-level windowed extremum (see :func:`kernels.window_extreme`).

    The adjoint is routed to the single source voxel of each output value.
    """
    x = a.data
    if x.ndim != 3:
        raise ValueError(f"morphological ops expect a (Z, Y, X) volume, got {x.shape}")
    out, src = kernels.window_extreme(x, offsets, inner_max, outer_max)
    n, shape, dtype = x.size, x.shape, x.dtype

    def bw(g):
        return (kernels.scatter_add(src, g, n).reshape(shape).astype(dtype, copy=False),)
    return Tensor._node(out, (a,), bw, "morph_reduce")


def masked_window_max(a, mask):
    """Max over the 3x3x3 neighbourhood restricted to ``mask``, replicate padded."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (3, 3, 3) or not mask.any():
        raise ValueError("mask must be a non-empty 3x3x3 boolean array")
    offsets = (np.argwhere(mask) - 1).astype(np.int32)[None]
    return morph_reduce(a, offsets, True, True)


def _pad_edge(x, pad):
    if pad == 0:
        return x
    widths = [(pad, pad)] * 3 + [(0, 0)] * (x.ndim - 3)
    return np.pad(x, widths, mode="edge")


def _fold_edge(gp, pad):
    """Adjoint of replicate padding: fold border adjoints onto edge voxels."""
    if pad == 0:
        return gp
    for ax in range(3):
        idx = [slice(None)] * gp.ndim
        n = gp.shape[ax]
        idx[ax] = slice(pad, n - pad)
        core = gp[tuple(idx)].copy()
        lo = [slice(None)] * gp.ndim
        hi = [slice(None)] * gp.ndim
        lo[ax] = slice(0, pad)
        hi[ax] = slice(n - pad, n)
        first = [slice(None)] * gp.ndim
        last = [slice(None)] * gp.ndim
        first[ax] = slice(0, 1)
        last[ax] = slice(-1, None)
        core[tuple(first)] += gp[tuple(lo)].sum(axis=ax, keepdims=True)
        core[tuple(last)] += gp[tuple(hi)].sum(axis=ax, keepdims=True)
        gp = core
    return gp


def conv3d(a, w, bias=None, stride=1):
    """3D convolution (cross-correlation) with replicate padding.

    ``a`` is ``(Z, Y, X, Cin)``, ``w`` is ``(k, k, k, Cin, Cout)`` with odd
    ``k``; output is ``(ceil(Z/stride), ..., Cout)``.
    """
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    w = as_tensor(w)
    x, W = a.data, w.data
    if x.ndim != 4 or W.ndim != 5:
        raise ValueError(f"conv3d expects (Z,Y,X,C) input and 5D kernel, got {x.shape}, {W.shape}")
    k = W.shape[0]
    if W.shape[:3] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"conv3d kernel must be cubic with odd size, got {W.shape[:3]}")
    if W.shape[3] != x.shape[3]:
        raise ValueError(f"conv3d channel mismatch: input {x.shape[3]}, kernel {W.shape[3]}")
    pad = k // 2
    Z, Y, X, cin = x.shape
    cout = W.shape[4]
    Zo, Yo, Xo = (Z - 1) // stride + 1, (Y - 1) // stride + 1, (X - 1) // stride + 1
    xp = _pad_edge(x, pad)
    taps = [(dz, dy, dx) for dz in range(k) for dy in range(k) for dx in range(k)]

    def view(arr, t):
        dz, dy, dx = t
        return arr[dz:dz + stride * (Zo - 1) + 1:stride,
                   dy:dy + stride * (Yo - 1) + 1:stride,
                   dx:dx + stride * (Xo - 1) + 1:stride]

    out = np.zeros((Zo * Yo * Xo, cout), dtype=np.result_type(x, W))
    for t in taps:
        out += view(xp, t).reshape(-1, cin) @ W[t]
    out = out.reshape(Zo, Yo, Xo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = np.empty_like(W)
        gxp = np.zeros(xp.shape, dtype=g.dtype) if a.requires_grad else None
        for t in taps:
            gw[t] = view(xp, t).reshape(-1, cin).T @ g2
            if gxp is not None:
                view(gxp, t)[...] += (g2 @ W[t].T).reshape(Zo, Yo, Xo, cin)
        gx = _fold_edge(gxp, pad) if gxp is not None else None
        return gx, gw

    node = Tensor._node(out, (a, w), bw, "conv3d")
    if bias is not None:
        node = add(node, bias)
    return node


def upsample_nearest2x(a):
    x = a.data
    out = x
    for ax in range(3):
        out = np.repeat(out, 2, axis=ax)
    shape = x.shape

    def bw(g):
        Z, Y, X = shape[:3]
        rest = shape[3:]
        return (g.reshape(Z, 2, Y, 2, X, 2, *rest).sum(axis=(1, 3, 5)),)
    return Tensor._node(out, (a,), bw, "upsample_nearest2x")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: shape mismatch {[t.shape for t in tensors]}") from exc
    cuts = np.cumsum(sizes)[:-1]
    return Tensor._node(out, tuple(tensors),
                        lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def reshape(a, shape):
    old = a.shape
    return Tensor._node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# -- backward ------------------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(root):
    """Accumulate ``d(root)/d(leaf)`` into ``leaf.grad`` for every leaf that requires it."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=p.dtype)
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp


# -- finite-difference checking ------------------------------------------------

@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    indices: np.ndarray
    tol: float
    nudges: int = 0
    skipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def max_rel_error(self):
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.0e} "
                f"coords={self.indices.size} skipped={self.skipped.size} nudges={self.nudges}")


def grad_check(f, x, h=1e-3, tol=1e-3, floor=1e-6, max_points=None, max_nudges=5, seed=0):
    """Compare the reverse-mode gradient of scalar ``f`` at ``x`` with central differences.

    Evaluation runs in float64. A coordinate whose central differences at
    steps ``h`` and ``h/2`` disagree by more than ``tol/2`` sits within ``h``
    of a kink of a max/min/abs; the whole base point is then nudged by a
    small random amount and the check restarts. Coordinates still on a kink
    after ``max_nudges`` are reported in ``skipped`` rather than scored.
    """
    rng = np.random.default_rng(seed)
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    idx = np.arange(x0.size)
    if max_points is not None and max_points < x0.size:
        idx = np.sort(rng.choice(x0.size, size=max_points, replace=False))

    def value(arr):
        with precision(np.float64):
            return float(f(Tensor(arr)).data)

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        fp = value(x0)
        flat[i] = orig - step
        fm = value(x0)
        flat[i] = orig
        return (fp - fm) / (2 * step)

    def rel(a, b):
        return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)

    nudges = 0
    while True:
        with precision(np.float64):
            xt = Tensor(x0, requires_grad=True)
            backward(f(xt))
        grad = np.zeros_like(x0) if xt.grad is None else xt.grad.astype(np.float64)
        numeric = np.empty(idx.size)
        kinked = []
        flat = x0.reshape(-1)
        for j, i in enumerate(idx):
            numeric[j] = central(flat, i, h)
            if rel(numeric[j], central(flat, i, h / 2)) > tol / 2:
                kinked.append(j)
        if not kinked or nudges >= max_nudges:
            break
        nudges += 1
        x0 = x0 + rng.uniform(-10 * h, 10 * h, size=x0.shape)

    analytic = grad.ravel()[idx]
    err = rel(analytic, numeric)
    keep = np.ones(idx.size, dtype=bool)
    keep[kinked] = False
    return GradCheckReport(analytic=analytic[keep], numeric=numeric[keep], rel_error=err[keep],
                           indices=idx[keep], tol=tol, nudges=nudges, skipped=idx[~keep])
