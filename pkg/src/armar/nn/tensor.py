"""Reverse-mode autodiff over dense numpy arrays.

Every operation builds a node holding its parents and a closure that routes
the incoming gradient to them. Calling ``backward`` walks the recorded trace
once; the trace is single-use, so a second backward through the same nodes
raises instead of silently producing partial gradients.
"""
from __future__ import annotations

import contextlib

import numpy as np

_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with.

    float64 exists for gradient checking only; training runs in float32.
    """
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_consumed", "name")

    def __init__(self, data, requires_grad=False, parents=(), bwd=None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._bwd = bwd
        self._consumed = False
        self.name = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self, grad=None):
        backward([self], None if grad is None else [grad])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are wrapped as constant tensors
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), _wrap(-1.0)))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, _wrap(-1.0)))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _needs(*tensors):
    return any(t.requires_grad for t in tensors)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(outputs, output_grads=None):
    """Run the recorded trace backwards from ``outputs``.

    Seeds each output with the matching gradient (all-ones for scalars when
    omitted), then applies the chain rule in reverse topological order. The
    trace is consumed: re-walking any part of it raises.
    """
    outputs = list(outputs)
    if output_grads is None:
        output_grads = []
        for o in outputs:
            if o.data.size != 1:
                raise ValueError("output_grads required for non-scalar outputs")
            output_grads.append(np.ones_like(o.data))
    if len(output_grads) != len(outputs):
        raise ValueError("one gradient per output required")
    for o in outputs:
        if o._consumed:
            raise RuntimeError("backward trace already consumed; re-run forward to record a new one")

    topo = []
    visited = set()
    for root in outputs:
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

    for o, g in zip(outputs, output_grads):
        g = np.asarray(g, dtype=o.data.dtype)
        if g.shape != o.data.shape:
            raise ValueError(f"output grad shape {g.shape} != output shape {o.data.shape}")
        _accumulate_root(o, g)

    for node in reversed(topo):
        if node._parents and node._consumed:
            raise RuntimeError("backward reached a trace portion that was already consumed")
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
        node._bwd = None
        if node._parents:
            node._consumed = True


def _accumulate_root(t, g):
    # root seeding ignores requires_grad: intermediates always carry grad
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def _node(data, parents, bwd):
    req = _needs(*parents)
    out = Tensor(data, requires_grad=req, parents=tuple(parents) if req else (),
                 bwd=bwd if req else None)
    # intermediates need grad storage during the walk
    out.requires_grad = req
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), bwd)


def pow_const(a, p):
    p = float(p)
    out_data = a.data ** p

    def bwd(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _node(out_data, (a,), bwd)


def exp(a):
    out_data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), bwd)


def tanh(a):
    out_data = np.tanh(a.data)

    def bwd(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), bwd)


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), bwd)


def silu(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * s

    def bwd(g):
        _accumulate(a, g * (s + a.data * s * (1.0 - s)))

    return _node(out_data, (a,), bwd)


def clip(a, lo, hi):
    out_data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        _accumulate(a, g * mask)

    return _node(out_data, (a,), bwd)


def matmul(a, b):
    out_data = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _node(out_data, (a, b), bwd)


def reshape(a, shape):
    in_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(in_shape))

    return _node(out_data, (a,), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def bwd(g):
        _accumulate(a, g.transpose(inv))

    return _node(out_data, (a,), bwd)


def sum_(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, in_shape))
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, in_shape))

    return _node(out_data, (a,), bwd)


def mean_(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(sum_(a, axis, keepdims), _wrap(1.0 / n))


def concat(tensors, axis):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        start = 0
        for t, s in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + s)
            _accumulate(t, g[tuple(idx)])
            start += s

    return _node(out_data, tuple(tensors), bwd)


def narrow(a, axis, start, length):
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _node(out_data, (a,), bwd)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _node(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# spatial primitives (NCHW)


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j]
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w]
    return xp


def conv2d(x, w, stride=1, padding=0):
    """2-D cross-correlation. x: (N,C,H,W), w: (O,C,kh,kw). Bias is added by the layer."""
    n, c, h, wd = x.data.shape
    o, cw, kh, kw = w.data.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {cw}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    w2 = w.data.reshape(o, -1)
    out_data = np.matmul(w2, cols).reshape(n, o, oh, ow)

    def bwd(g):
        gm = g.reshape(n, o, oh * ow)
        if w.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(w, gw.reshape(w.data.shape))
        if x.requires_grad:
            gcols = np.matmul(w2.T, gm)
            _accumulate(x, _col2im(gcols, x.data.shape, kh, kw, stride, padding))

    return _node(out_data, (x, w), bwd)


def conv_transpose2d(x, w, stride=1, padding=0):
    """Adjoint of conv2d. x: (N,Ci,H,W), w: (Ci,Co,kh,kw)."""
    n, ci, h, wd = x.data.shape
    cw, co, kh, kw = w.data.shape
    if ci != cw:
        raise ValueError(f"conv_transpose2d: input has {ci} channels, kernel expects {cw}")
    oh = (h - 1) * stride + kh - 2 * padding
    ow = (wd - 1) * stride + kw - 2 * padding
    w2 = w.data.reshape(ci, -1)
    x_flat = x.data.reshape(n, ci, h * wd)
    cols = np.matmul(w2.T, x_flat)
    out_data = _col2im(cols, (n, co, oh, ow), kh, kw, stride, padding)

    def bwd(g):
        gcols, goh, gow = _im2col(g, kh, kw, stride, padding)
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape(x.data.shape)
            _accumulate(x, gx)
        if w.requires_grad:
            gw = np.matmul(x_flat, gcols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(w, gw.reshape(w.data.shape))

    return _node(out_data, (x, w), bwd)


def nearest_upsample2(x):
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        n, c, h2, w2 = g.shape
        _accumulate(x, g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _node(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# composites


def square(a):
    return mul(a, a)


def mse(a, b):
    return mean_(square(a - b))
