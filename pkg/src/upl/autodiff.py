"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A Tensor records the operation that produced it; ``backward`` replays the
tape in reverse topological order and accumulates gradients into every
reachable tensor with ``requires_grad``. Every operation validates that its
output is finite: NaN/Inf anywhere is a contract violation and raises
NumericError immediately rather than propagating.

The op set is deliberately small: elementwise arithmetic with numpy
broadcasting, 2-D matmul, reductions, the activations the model needs, row
gather/scatter and a cosine-similarity primitive with an explicit zero-row
convention.
"""

from contextlib import contextmanager

import numpy as np

from upl.errors import NumericError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data, op_name):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op_name}")


class Tensor:
    """Dense float64 array with an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "tensor constructor")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable requires_grad tensor.

        ``self`` must be scalar unless an explicit seed gradient is given.
        Repeated calls without zeroing accumulate.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ValueError("seed gradient shape mismatch")

        order = _toposort(self)
        grads = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _toposort(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return reversed(order)


def _ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op_name, parents, backward_fn) -> Tensor:
    _check_finite(data, op_name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    return _make(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        "div",
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * out / b.data, b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _ensure_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(
        a.data @ b.data,
        "matmul",
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a) -> Tensor:
    a = _ensure_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _ensure_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape).copy(), "reshape", (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [_ensure_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), backward)


def narrow(a, axis, start, length) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    a = _ensure_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape = a.data.shape

    def backward(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _make(a.data[idx].copy(), "narrow", (a,), backward)


def take_rows(a, indices) -> Tensor:
    """Gather rows of a 2-D tensor; duplicate indices accumulate on backward."""
    a = _ensure_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    shape = a.data.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, indices, g)
        return (out,)

    return _make(a.data[indices].copy(), "take_rows", (a,), backward)


def neighbor_mean(a, idx) -> Tensor:
    """Mean of rows a[idx[i, :]] for each i; idx is a constant (n, k) index array."""
    a = _ensure_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    k = idx.shape[1]
    shape = a.data.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx.ravel(), np.repeat(g / k, k, axis=0))
        return (out,)

    return _make(a.data[idx].mean(axis=1), "neighbor_mean", (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _ensure_tensor(a)
    shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _ensure_tensor(a)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), "mean", (a,), backward)


# ---------------------------------------------------------------------------
# nonlinear elementwise ops


def exp(a) -> Tensor:
    a = _ensure_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _ensure_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _ensure_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g / (2.0 * out),))


def tanh(a) -> Tensor:
    a = _ensure_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _ensure_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _ensure_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-np.abs(x)))
    sig = np.where(x >= 0, sig, 1.0 - sig)
    return _make(out, "softplus", (a,), lambda g: (g * sig,))


def clip(a, lo, hi) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input lies inside."""
    a = _ensure_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (g * mask,))


def softmax(a, axis=-1) -> Tensor:
    a = _ensure_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), backward)


def log_softmax(a, axis=-1) -> Tensor:
    a = _ensure_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), backward)


def cosine_rows(a, b) -> Tensor:
    """Pairwise cosine similarity between rows of a (n, d) and b (C, d).

    Rows with zero norm on either side yield cosine 0 and receive no
    gradient: absent features/prototypes are inert by convention.
    """
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"cosine_rows shape mismatch: {a.shape} vs {b.shape}")
    na = np.sqrt(np.einsum("ij,ij->i", a.data, a.data))
    nb = np.sqrt(np.einsum("ij,ij->i", b.data, b.data))
    na_ok, nb_ok = na > 0.0, nb > 0.0
    na_safe = np.where(na_ok, na, 1.0)
    nb_safe = np.where(nb_ok, nb, 1.0)
    denom = np.outer(na_safe, nb_safe)
    valid = np.outer(na_ok, nb_ok)
    out = np.where(valid, (a.data @ b.data.T) / denom, 0.0)

    def backward(g):
        gs = np.where(valid, g / denom, 0.0)
        ga = gs @ b.data - a.data * ((g * out).sum(axis=1) / np.where(na_ok, na * na, 1.0))[:, None]
        gb = gs.T @ a.data - b.data * ((g * out).sum(axis=0) / np.where(nb_ok, nb * nb, 1.0))[:, None]
        return (np.where(na_ok, 1.0, 0.0)[:, None] * ga, np.where(nb_ok, 1.0, 0.0)[:, None] * gb)

    return _make(out, "cosine_rows", (a, b), backward)
