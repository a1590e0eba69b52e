"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and records the closure needed to push
gradients to its parents.  ``backward()`` on a scalar loss walks the
tape once in reverse topological order.  Only the primitives this
package needs exist; everything else (layer norm, gelu, losses) is
composed from them so each gradient rule stays small enough to verify
against central finite differences (see tests/test_autodiff.py).

Convolution forward/backward run on the kernels in ``backend`` so the
numba/numpy switch applies to training as well as inference.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import backend

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._backward = backward

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        # iterative DFS: graphs here can be several hundred nodes deep
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
                node._backward = None  # free closures/activations eagerly
                node._parents = ()

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -float(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_const(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter(Tensor):
    """Leaf tensor updated by an optimizer."""

    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data, parents, backward):
    req = _grad_enabled and any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward)


# -- elementwise ---------------------------------------------------------


def add(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out_data = a.data + b.data
    out = _make(out_data, (a, b), None)
    if out.requires_grad:

        def bw():
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(out.grad, b.data.shape))

        out._backward = bw
    return out


def mul(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = _make(a.data * b.data, (a, b), None)
    if out.requires_grad:

        def bw():
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

        out._backward = bw
    return out


def pow_const(a: Tensor, p) -> Tensor:
    p = float(p)
    out = _make(a.data**p, (a,), None)
    if out.requires_grad:

        def bw():
            _accum(a, out.grad * p * a.data ** (p - 1.0))

        out._backward = bw
    return out


def texp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = _make(y, (a,), None)
    if out.requires_grad:

        def bw():
            _accum(a, out.grad * y)

        out._backward = bw
    return out


def tlog(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), (a,), None)
    if out.requires_grad:

        def bw():
            _accum(a, out.grad / a.data)

        out._backward = bw
    return out


def tabs(a: Tensor) -> Tensor:
    out = _make(np.abs(a.data), (a,), None)
    if out.requires_grad:
        sign = np.sign(a.data)

        def bw():
            _accum(a, out.grad * sign)

        out._backward = bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = _make(y, (a,), None)
    if out.requires_grad:

        def bw():
            _accum(a, out.grad * y * (1.0 - y))

        out._backward = bw
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _make(y, (a,), None)
    if out.requires_grad:

        def bw():
            _accum(a, out.grad * (1.0 - y * y))

        out._backward = bw
    return out


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)
    out = _make(y, (a,), None)
    if out.requires_grad:
        mask = (a.data > 0).astype(a.data.dtype)

        def bw():
            _accum(a, out.grad * mask)

        out._backward = bw
    return out


def silu(a: Tensor) -> Tensor:
    return mul(a, sigmoid(a))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    inner = mul(add(a, mul(pow_const(a, 3.0), 0.044715)), _GELU_C)
    return mul(mul(a, add(tanh(inner), 1.0)), 0.5)


# -- reductions -----------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), None)
    if out.requires_grad:
        shape = a.data.shape

        def bw():
            g = out.grad
            if axis is not None and not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                ax = tuple(i % len(shape) for i in ax)
                expand = list(out.grad.shape)
                for i in sorted(ax):
                    expand.insert(i, 1)
                g = g.reshape(expand)
            _accum(a, np.broadcast_to(g, shape).astype(a.data.dtype, copy=False))

        out._backward = bw
    return out


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[i % a.data.ndim] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# -- shape ops ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = _make(a.data.reshape(shape), (a,), None)
    if out.requires_grad:
        orig = a.data.shape

        def bw():
            _accum(a, out.grad.reshape(orig))

        out._backward = bw
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), None)
    if out.requires_grad:
        inv = tuple(np.argsort(axes))

        def bw():
            _accum(a, out.grad.transpose(inv))

        out._backward = bw
    return out


def roll(a: Tensor, shifts, axes) -> Tensor:
    out = _make(np.roll(a.data, shifts, axis=axes), (a,), None)
    if out.requires_grad:
        neg = tuple(-s for s in shifts)

        def bw():
            _accum(a, np.roll(out.grad, neg, axis=axes))

        out._backward = bw
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None)
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def bw():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(lo, hi)
                    _accum(t, out.grad[tuple(sl)])

        out._backward = bw
    return out


def substitute(x: Tensor, data: np.ndarray) -> Tensor:
    """Tensor carrying `data` verbatim whose gradient flows unchanged to x.

    Straight-through estimator: the forward value is replaced bit-for-bit
    while the backward pass treats the op as the identity on x.
    """
    out = _make(np.asarray(data), (x,), None)
    if out.requires_grad:

        def bw():
            _accum(x, out.grad)

        out._backward = bw
    return out


def take_rows(table: Tensor, idx) -> Tensor:
    """Embedding-style row gather; backward scatter-adds into the table."""
    idx = np.asarray(idx)
    out = _make(table.data[idx], (table,), None)
    if out.requires_grad:

        def bw():
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, out.grad)

        out._backward = bw
    return out


# -- matmul / softmax ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data @ b.data, (a, b), None)
    if out.requires_grad:

        def bw():
            g = out.grad
            if a.requires_grad:
                if b.data.ndim == 2:
                    _accum(a, g @ b.data.T)
                else:
                    _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if b.requires_grad:
                if b.data.ndim == 2:
                    k = a.data.shape[-1]
                    _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
                else:
                    _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

        out._backward = bw
    return out


def softmax(a: Tensor, axis=-1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (a,), None)
    if out.requires_grad:

        def bw():
            g = out.grad
            _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

        out._backward = bw
    return out


# -- convolution -----------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """2-D convolution, x [N,Ci,H,W], w [Co,Ci,kh,kw], b [Co] or None."""
    n, ci, h, wd = x.data.shape
    co, ci_w, kh, kw = w.data.shape
    if ci != ci_w:
        raise ValueError(f"conv2d channel mismatch: input {ci} vs weight {ci_w}")
    cols = backend.im2col(x.data, kh, kw, stride, pad)
    w2 = w.data.reshape(co, -1)
    out_flat = w2 @ cols
    if b is not None:
        out_flat = out_flat + b.data[:, None]
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    parents = (x, w) if b is None else (x, w, b)
    out = _make(out_flat.reshape(n, co, oh, ow), parents, None)
    if out.requires_grad:

        def bw():
            g2 = out.grad.reshape(n, co, -1)
            if w.requires_grad:
                _accum(w, np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape))
            if b is not None and b.requires_grad:
                _accum(b, g2.sum(axis=(0, 2)))
            if x.requires_grad:
                dcols = np.matmul(w2.T, g2)
                _accum(x, backend.col2im(dcols, x.data.shape, kh, kw, stride, pad))

        out._backward = bw
    return out


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """Transposed 2-D convolution, x [N,Ci,H,W], w [Ci,Co,kh,kw].

    Output spatial size is (H-1)*stride + kh - 2*pad; exact adjoint of
    conv2d with the same stride/pad.
    """
    n, ci, h, wd = x.data.shape
    ci_w, co, kh, kw = w.data.shape
    if ci != ci_w:
        raise ValueError(f"conv_transpose2d channel mismatch: input {ci} vs weight {ci_w}")
    oh = (h - 1) * stride + kh - 2 * pad
    ow = (wd - 1) * stride + kw - 2 * pad
    w2 = w.data.reshape(ci, -1)
    x2 = x.data.reshape(n, ci, -1)
    cols = np.matmul(w2.T, x2)
    out_data = backend.col2im(cols, (n, co, oh, ow), kh, kw, stride, pad)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = _make(out_data, parents, None)
    if out.requires_grad:

        def bw():
            gcols = backend.im2col(out.grad, kh, kw, stride, pad)
            if x.requires_grad:
                _accum(x, np.matmul(w2, gcols).reshape(x.data.shape))
            if w.requires_grad:
                dw2 = np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0)
                _accum(w, dw2.reshape(w.data.shape))
            if b is not None and b.requires_grad:
                _accum(b, out.grad.sum(axis=(0, 2, 3)))

        out._backward = bw
    return out


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = _make(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), (x,), None)
    if out.requires_grad:
        n, c, h, w = x.data.shape

        def bw():
            _accum(x, out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

        out._backward = bw
    return out


# -- composed helpers -------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    """Normalize over the last axis; gamma/beta broadcast along it."""
    mu = tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = pow_const(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    """Normalize [N,C,H,W] within channel groups."""
    n, c, h, w = x.data.shape
    xg = reshape(x, (n, groups, (c // groups) * h * w))
    mu = tmean(xg, axis=-1, keepdims=True)
    xc = xg - mu
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = pow_const(add(var, eps), -0.5)
    y = reshape(mul(xc, inv), (n, c, h, w))
    return add(mul(y, reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))
