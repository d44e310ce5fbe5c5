"""Central finite-difference oracle for backward passes.

Deliberately independent of the autodiff internals: it only re-runs the
forward function and perturbs raw arrays. Run under float64.
"""
from __future__ import annotations

import numpy as np

from .tensor import backward


def numeric_gradient(forward_fn, tensor, h_scale=1e-5):
    """Central differences of ``forward_fn() -> scalar`` w.r.t. one tensor."""
    x = tensor.data
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = h_scale * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = float(forward_fn().data)
        flat[i] = orig - h
        fm = float(forward_fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(forward_fn, tensors, atol=1e-8):
    """Analytic-vs-numeric comparison; returns the worst relative error.

    ``forward_fn`` must rebuild the graph on every call (traces are
    single-use). Near-zero gradient pairs within ``atol`` count as exact.
    """
    loss = forward_fn()
    for t in tensors:
        t.grad = None
    backward([loss])
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_gradient(forward_fn, t)
        diff = np.abs(analytic - numeric)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
        rel = np.where(diff <= atol, 0.0, diff / denom)
        worst = max(worst, float(rel.max()))
    return worst
