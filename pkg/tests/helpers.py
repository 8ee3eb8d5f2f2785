"""Shared test utilities: finite differences and error norms."""

import numpy as np


def rel_err(approx, exact, guard=1e-8):
    """Element-wise max relative error with a guarded denominator."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    return float(np.max(np.abs(approx - exact) / np.maximum(np.abs(exact), guard)))


def fd_grad(fn, tensors, eps=1e-5):
    """Central finite differences of a scalar-valued recomputation.

    ``fn`` must recompute the scalar from the tensors' current ``.data``;
    each entry is perturbed in place, so fn cannot cache forward results.
    Returns one gradient array per tensor.
    """
    def scalar():
        v = fn()
        return float(v.data) if hasattr(v, "data") else float(v)

    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = scalar()
            flat[i] = keep - eps
            lo = scalar()
            flat[i] = keep
            g[i] = (hi - lo) / (2.0 * eps)
        grads.append(g.reshape(t.data.shape))
    return grads
