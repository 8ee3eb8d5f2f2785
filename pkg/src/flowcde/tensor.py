"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Everything downstream (splines feed constants in, the solvers, the encoder,
the prediction head) runs on these tensors.  Storage is a row-major numpy
array; the tape is the implicit graph of ``TapeNode`` records hanging off
result tensors.  Gradients are computed by a reverse topological walk from a
scalar root.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "backward",
    "vjp",
    "add",
    "sub",
    "mul",
    "matmul",
    "sigmoid",
    "tanh",
    "softmax",
    "absolute",
    "tsum",
    "tmean",
    "concat",
    "reshape",
    "permute",
    "broadcast_to",
    "where",
]

_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class enable_grad:
    """Context manager that forces tape recording back on."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = True
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class TapeNode:
    """One recorded operation: kind, parent tensors, and the backward rule.

    Parents are always tensors created strictly earlier, so the implicit
    tape is acyclic by construction.  ``vjp`` maps the incoming gradient to
    one gradient array per parent (or None for non-differentiable slots).
    """

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op, parents, vjp):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """A dense 64-bit real array, optionally tracked on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "node")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(
                f"non-finite values in tensor construction{' for ' + name if name else ''}"
            )
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.node = None

    # -- metadata ----------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.name = self.name
        out.node = None
        return out

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _do_slice(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make_result(data: np.ndarray, op: str, parents, vjp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"op '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.node = TapeNode(op, tuple(parents), vjp) if track else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- arithmetic -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def vjp_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make_result(a.data + b.data, "add", (a, b), vjp_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def vjp_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make_result(a.data - b.data, "sub", (a, b), vjp_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product with trailing-axis broadcasting."""
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp_fn(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make_result(ad * bd, "mul", (a, b), vjp_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims disagree {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def vjp_fn(g):
        return g @ bd.T, ad.T @ g

    return _make_result(ad @ bd, "matmul", (a, b), vjp_fn)


# -- elementwise nonlinearities ---------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp_fn(g):
        return (g * out * (1.0 - out),)

    return _make_result(out, "sigmoid", (x,), vjp_fn)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def vjp_fn(g):
        return (g * (1.0 - out * out),)

    return _make_result(out, "tanh", (x,), vjp_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to one."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make_result(out, "softmax", (x,), vjp_fn)


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def vjp_fn(g):
        return (g * sign,)

    return _make_result(np.abs(x.data), "abs", (x,), vjp_fn)


# -- reductions --------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def vjp_fn(g):
        return (_expand_reduced(np.asarray(g), shape, axis, keepdims).copy(),)

    return _make_result(np.sum(x.data, axis=axis, keepdims=keepdims), "sum", (x,), vjp_fn)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for a in axes:
            count *= shape[a % len(shape)]

    def vjp_fn(g):
        return (_expand_reduced(np.asarray(g), shape, axis, keepdims) / count,)

    return _make_result(np.mean(x.data, axis=axis, keepdims=keepdims), "mean", (x,), vjp_fn)


# -- shape manipulation -------------------------------------------------------


def concat(tensors, axis=0) -> Tensor:
    tensors = [(_as_tensor(t)) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp_fn(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make_result(data, "concat", tuple(tensors), vjp_fn)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def vjp_fn(g):
        return (g.reshape(old),)

    return _make_result(x.data.reshape(shape), "reshape", (x,), vjp_fn)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp_fn(g):
        return (np.transpose(g, inverse),)

    return _make_result(np.ascontiguousarray(np.transpose(x.data, axes)), "permute", (x,), vjp_fn)


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape

    def vjp_fn(g):
        return (_unbroadcast(g, old),)

    return _make_result(np.broadcast_to(x.data, shape).copy(), "broadcast", (x,), vjp_fn)


def _do_slice(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def vjp_fn(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    data = x.data[idx]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data, dtype=np.float64)
    else:
        data = data.copy()
    return _make_result(data, "slice", (x,), vjp_fn)


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select by a constant boolean mask (not differentiable in mask)."""
    mask = np.asarray(mask, dtype=bool)
    _check_broadcast(a, b, "where")

    def vjp_fn(g):
        return (
            _unbroadcast(np.where(mask, g, 0.0), a.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.shape),
        )

    return _make_result(np.where(mask, a.data, b.data), "where", (a, b), vjp_fn)


# -- backward pass ------------------------------------------------------------


def _topo_order(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def _walk(root: Tensor, seed: np.ndarray):
    """Reverse-tape sweep; returns {id(tensor): grad} for all visited leaves."""
    grads = {id(root): seed}
    leaves = {}
    for t in reversed(_topo_order(root)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if id(t) in leaves:
                leaves[id(t)] = (t, leaves[id(t)][1] + g)
            else:
                leaves[id(t)] = (t, g)
            continue
        for p, pg in zip(t.node.parents, t.node.vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return leaves


def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires-grad leaf.

    Repeated calls without ``zero_grad`` keep accumulating, matching the
    usual minibatch-accumulation semantics.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward on a tensor with no tape (detached or grad disabled)")
    seed = np.ones_like(root.data)
    for t, g in _walk(root, seed).values():
        if t.grad is None:
            t.grad = g.reshape(t.shape).copy()
        else:
            t.grad = t.grad + g.reshape(t.shape)


def vjp(root: Tensor, wrt, seed=None) -> dict:
    """Vector-Jacobian product: gradients of ``seed . root`` for each tensor in wrt.

    Unlike :func:`backward` this never touches ``.grad``; results come back
    as ``{id(tensor): ndarray}`` with zeros for unreached tensors.  Used by
    the adjoint integrator, which must not disturb outer accumulation.
    """
    if not root.requires_grad:
        return {id(t): np.zeros(t.shape) for t in wrt}
    if seed is None:
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(seed, dtype=np.float64).reshape(root.shape)
    leaves = _walk(root, seed)
    out = {}
    for t in wrt:
        if id(t) in leaves:
            out[id(t)] = leaves[id(t)][1].reshape(t.shape)
        else:
            out[id(t)] = np.zeros(t.shape)
    return out
