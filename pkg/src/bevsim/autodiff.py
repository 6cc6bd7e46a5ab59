"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every learned operation in the package is built from the ops in this module.
The graph is rebuilt on each forward pass; `backward` replays it in exact
reverse execution order, so two identical runs produce bitwise-identical
gradients. `finite_diff_check` provides the central-difference audit used
throughout the test suite.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import kernels

_seq_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (used for frozen teachers)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode autodiff.

    `grad` stays None until a backward pass reaches this tensor. Tensors
    produced by ops carry closures back to their parents; leaves do not.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = -1
        self._done = False

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a single-element tensor, shape is {self.shape}")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        """A constant view of this tensor's data, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("divide by a Python scalar; tensor division is not an op")
        return mul(self, 1.0 / other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def backward(self):
        backward(self)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_seq_counter)
    return out


def _accumulate(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


class Graph:
    """Ordered record of the executed ops reachable from one output tensor.

    The node order is execution order; `run_backward` walks it reversed and
    may run once per graph.
    """

    def __init__(self, root, nodes):
        self.root = root
        self.nodes = nodes
        self.consumed = False

    @staticmethod
    def trace(root):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                if t._done and id(t) not in seen:
                    raise RuntimeError("graph already consumed by a previous backward")
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return Graph(root, nodes)

    def run_backward(self):
        if self.consumed:
            raise RuntimeError("backward may run once per recorded graph")
        self.consumed = True
        root = self.root
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            node._backward(node.grad)
            node._done = True
            node._backward = None
            node._parents = ()


def backward(loss):
    """Populate grads of every requires_grad ancestor of a scalar loss."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    Graph.trace(loss).run_backward()


# -- elementwise ops -------------------------------------------------------

def _as_operands(a, b):
    at = a if isinstance(a, Tensor) else Tensor(a)
    bt = b if isinstance(b, Tensor) else Tensor(b)
    if at.shape != bt.shape and at.size != 1 and bt.size != 1:
        raise ValueError(
            f"elementwise shapes must match or one side be scalar: {at.shape} vs {bt.shape}"
        )
    return at, bt


def _reduce_to(g, shape):
    # collapse a broadcasted gradient back onto a scalar-shaped operand
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b):
    at, bt = _as_operands(a, b)

    def bwd(g):
        _accumulate(at, _reduce_to(g, at.shape))
        _accumulate(bt, _reduce_to(g, bt.shape))

    return _node(at.data + bt.data, (at, bt), bwd)


def sub(a, b):
    at, bt = _as_operands(a, b)

    def bwd(g):
        _accumulate(at, _reduce_to(g, at.shape))
        _accumulate(bt, _reduce_to(-g, bt.shape))

    return _node(at.data - bt.data, (at, bt), bwd)


def mul(a, b):
    at, bt = _as_operands(a, b)

    def bwd(g):
        _accumulate(at, _reduce_to(g * bt.data, at.shape))
        _accumulate(bt, _reduce_to(g * at.data, bt.shape))

    return _node(at.data * bt.data, (at, bt), bwd)


def square(x):
    def bwd(g):
        _accumulate(x, g * (2.0 * x.data))

    return _node(np.square(x.data), (x,), bwd)


def exp(x):
    out_data = np.exp(x.data)

    def bwd(g):
        _accumulate(x, g * out_data)

    return _node(out_data, (x,), bwd)


def log(x):
    def bwd(g):
        _accumulate(x, g / x.data)

    return _node(np.log(x.data), (x,), bwd)


def relu(x):
    def bwd(g):
        _accumulate(x, g * (x.data > 0.0))

    return _node(np.maximum(x.data, 0.0), (x,), bwd)


def sigmoid(x):
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _node(out_data, (x,), bwd)


def tanh(x):
    out_data = np.tanh(x.data)

    def bwd(g):
        _accumulate(x, g * (1.0 - out_data * out_data))

    return _node(out_data, (x,), bwd)


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes through the unclamped region only."""
    mask = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        _accumulate(x, g * mask)

    return _node(np.clip(x.data, lo, hi), (x,), bwd)


def abspow(x, p):
    """|x| ** p for p >= 1; the gradient vanishes at x = 0 when p > 1."""
    ax = np.abs(x.data)

    def bwd(g):
        _accumulate(x, g * p * np.power(ax, p - 1.0) * np.sign(x.data))

    return _node(np.power(ax, p), (x,), bwd)


def absolute(x):
    """|x| composed from relu so the subgradient at 0 is 0."""
    return add(relu(x), relu(mul(x, -1.0)))


# -- reductions and shape ops ----------------------------------------------

def tsum(x, axis=None, keepdims=False):
    out_data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            gx = np.broadcast_to(g.reshape((1,) * x.ndim), x.shape)
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            ge = g if keepdims else np.expand_dims(g, axes)
            gx = np.broadcast_to(ge, x.shape)
        _accumulate(x, gx.copy())

    return _node(out_data, (x,), bwd)


def tmean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    def bwd(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), bwd)


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accumulate(x, g.transpose(inv))

    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), bwd)


def broadcast_to(x, shape):
    shape = tuple(shape)
    np.broadcast_to(x.data, shape)  # raises early on incompatible shapes
    pad = len(shape) - x.ndim
    summed_axes = tuple(range(pad)) + tuple(
        pad + i for i, d in enumerate(x.shape) if d == 1 and shape[pad + i] != 1
    )

    def bwd(g):
        gx = np.sum(g, axis=summed_axes, keepdims=True) if summed_axes else g
        _accumulate(x, gx.reshape(x.shape))

    return _node(np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,), bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def stack(tensors, axis=0):
    tensors = list(tensors)

    def bwd(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def take(x, index, axis, unique=False):
    """Select rows along an axis; set unique=True when indices never repeat
    (turns the gradient scatter into a plain assignment)."""
    index = np.asarray(index, dtype=np.int64)

    def bwd(g):
        gx = np.zeros_like(x.data)
        sl = (slice(None),) * axis + (index,)
        if unique:
            gx[sl] = g
        else:
            np.add.at(gx, sl, g)
        _accumulate(x, gx)

    return _node(np.take(x.data, index, axis=axis), (x,), bwd)


# -- linear algebra / structured ops ----------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul takes 2-D tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} vs {b.shape}")

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bwd)


def conv2d(x, w, stride=1, pad=0, bias=None):
    """Cross-correlation of (N, Ci, H, W) or (Ci, H, W) with (Co, Ci, k, k);
    optional per-output-channel bias."""
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d weight must be (Co, Ci, k, k), got {w.shape}")
    k = w.shape[2]
    if k % 2 != 1:
        raise ValueError(f"conv2d kernel size must be odd, got {k}")
    if pad < 0:
        raise ValueError("conv2d pad must be >= 0")
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise ValueError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {xd.shape[1]}, weight {w.shape[1]}")
    h, wd = xd.shape[2], xd.shape[3]
    for extent in (h, wd):
        if (extent + 2 * pad - k) % stride != 0 or (extent + 2 * pad - k) < 0:
            raise ValueError(
                f"conv2d output size not an integer: extent {extent}, k {k}, stride {stride}, pad {pad}"
            )
    keep_cols = _grad_enabled and w.requires_grad
    if keep_cols:
        out_data, cols = kernels.conv2d_forward(xd, w.data, stride, pad, return_cols=True)
    else:
        out_data, cols = kernels.conv2d_forward(xd, w.data, stride, pad), None

    def bwd(g):
        gb = g if batched else g[None]
        if x.requires_grad:
            gx = kernels.conv2d_backward_x(gb, w.data, xd.shape, stride, pad)
            _accumulate(x, gx if batched else gx[0])
        if w.requires_grad:
            _accumulate(w, kernels.conv2d_backward_w(xd, gb, w.shape, stride, pad, cols))

    return _node(out_data if batched else out_data[0], (x, w), bwd)


def avg_pool2(x):
    """2x2 mean pooling with stride 2 on (N, C, H, W); extents must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even extents, got {h}x{w}")
    blocks = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return mul(tsum(blocks, axis=(3, 5)), 0.25)


def softmax(x, axis):
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        _accumulate(x, out_data * (g - dot))

    return _node(out_data, (x,), bwd)


def bilinear_sample(f, pts):
    """Sample (B, C, H, W) or (C, H, W) maps at normalized (u, v) points.

    pts is (B, P, 2) or (P, 2) with both coordinates in [0, 1]; out-of-range
    points clamp to the border. Differentiable w.r.t. both arguments.
    """
    batched = f.ndim == 4
    if batched != (pts.ndim == 3):
        raise ValueError(f"map/point batching mismatch: {f.shape} vs {pts.shape}")
    fd = np.ascontiguousarray(f.data if batched else f.data[None])
    pd = np.ascontiguousarray(pts.data if batched else pts.data[None])
    out_data = kernels.bilinear_forward(fd, pd)

    def bwd(g):
        gb = np.ascontiguousarray(g if batched else g[None])
        gmaps, gpts = kernels.bilinear_backward(fd, pd, gb)
        _accumulate(f, gmaps if batched else gmaps[0])
        _accumulate(pts, gpts if batched else gpts[0])

    return _node(out_data if batched else out_data[0], (f, pts), bwd)


def scatter_add(values, index, n_cells):
    """Sum (B, P, C) or (P, C) rows into n_cells buckets; gradient gathers back."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= n_cells):
        bad = index[(index < 0) | (index >= n_cells)][0]
        raise ValueError(f"scatter_add index {int(bad)} outside [0, {n_cells})")
    batched = values.ndim == 3
    vd = values.data if batched else values.data[None]
    out_data = kernels.scatter_add_forward(vd, index, n_cells)

    def bwd(g):
        gb = g if batched else g[None]
        gv = kernels.scatter_add_backward(np.ascontiguousarray(gb), index)
        _accumulate(values, gv if batched else gv[0])

    return _node(out_data if batched else out_data[0], (values,), bwd)


def segment_max(values, index, n_cells):
    """Per-bucket max of (P, C) rows; gradient routes to each argmax row."""
    index = np.asarray(index, dtype=np.int64)
    out_data, arg = kernels.segment_max_forward(values.data, index, n_cells)
    p = values.shape[0]

    def bwd(g):
        _accumulate(values, kernels.segment_max_backward(np.ascontiguousarray(g), arg, p))

    return _node(out_data, (values,), bwd)


# -- finite-difference audit -------------------------------------------------

@dataclass
class FiniteDiffReport:
    """Outcome of a central-difference gradient audit on one tensor."""

    max_rel_err: float
    passed: bool
    n_checked: int
    entries: list = field(default_factory=list)  # (flat_index, analytic, numeric, rel_err)


def finite_diff_check(fn, x, eps=1e-5, rel_tol=1e-4, sample=None, rng=None):
    """Compare backward grads of scalar `fn(x)` against central differences.

    Checks every element of x, or `sample` randomly chosen ones. Relative
    error uses max(|analytic|, |numeric|, 1e-8) as denominator; any
    non-finite value fails the report.
    """
    x.grad = None
    out = fn(x)
    if out.data.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar function, got {out.shape}")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    n = flat.size
    if sample is not None and sample < n:
        rng = rng or np.random.default_rng(0)
        idxs = rng.choice(n, size=sample, replace=False)
    else:
        idxs = np.arange(n)

    entries = []
    max_err = 0.0
    ok = True
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            hi = float(fn(x).data.reshape(-1)[0])
        flat[i] = orig - eps
        with no_grad():
            lo = float(fn(x).data.reshape(-1)[0])
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        a = float(analytic.reshape(-1)[i])
        if not (np.isfinite(numeric) and np.isfinite(a)):
            entries.append((int(i), a, numeric, np.inf))
            ok = False
            max_err = np.inf
            continue
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        entries.append((int(i), a, numeric, err))
        max_err = max(max_err, err)
    ok = ok and max_err <= rel_tol
    return FiniteDiffReport(max_rel_err=max_err, passed=ok, n_checked=len(idxs), entries=entries)
