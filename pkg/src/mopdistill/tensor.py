"""Dense float64 tensors with reverse-mode differentiation.

A Tensor wraps a numpy array and, when gradients are requested, remembers
how it was produced. Calling :func:`backward` on a scalar walks the recorded
graph in reverse topological order and accumulates gradients into every
tensor that has ``requires_grad`` set, including designated input tensors
(needed by gradient-based observation attacks, not just parameter updates).

Everything is float64. Graphs are single-owner objects: build, backward,
discard. Nothing here is thread-safe by design.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_grad_fns", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: tuple = (), grad_fns: tuple = ()):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._grad_fns = grad_fns
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # -- graph construction helpers -------------------------------------

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # Arithmetic sugar used throughout the networks.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _make(data, parents, grad_fns) -> Tensor:
    if _needs_grad(*parents):
        return Tensor(data, requires_grad=True, parents=parents, grad_fns=grad_fns)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- primitives ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.data.shape} with {b.data.shape}") from e
    return _make(out, (a, b), (lambda g: _unbroadcast(g, a.data.shape),
                               lambda g: _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: cannot broadcast {a.data.shape} with {b.data.shape}") from e
    return _make(out, (a, b), (lambda g: _unbroadcast(g, a.data.shape),
                               lambda g: _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.data.shape} with {b.data.shape}") from e
    return _make(out, (a, b), (lambda g: _unbroadcast(g * b.data, a.data.shape),
                               lambda g: _unbroadcast(g * a.data, b.data.shape)))


def divide(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"divide: cannot broadcast {a.data.shape} with {b.data.shape}") from e
    return _make(out, (a, b), (lambda g: _unbroadcast(g / b.data, a.data.shape),
                               lambda g: _unbroadcast(-g * a.data / (b.data * b.data),
                                                      b.data.shape)))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 1 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def grad_a(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)

    def grad_b(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)

    return _make(out, (a, b), (grad_a, grad_b))


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), (lambda g: g * (a.data > 0),))


def softmax(a, axis: int = -1) -> Tensor:
    """Row-stochastic softmax, stabilised by max subtraction."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_a(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _make(s, (a,), (grad_a,))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    se = e.sum(axis=axis, keepdims=True)
    out = m + np.log(se)
    soft = e / se
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def grad_a(g):
        if not keepdims:
            g = np.expand_dims(g, axis=axis)
        return g * soft

    return _make(out, (a,), (grad_a,))


def log_softmax(a, axis: int = -1) -> Tensor:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale-shift."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = a.data.shape[-1]

    def grad_a(g):
        gx = g * gain.data
        return inv * (gx - gx.mean(axis=-1, keepdims=True)
                      - xhat * (gx * xhat).mean(axis=-1, keepdims=True))

    def grad_gain(g):
        return _unbroadcast(g * xhat, gain.data.shape)

    def grad_bias(g):
        return _unbroadcast(g, bias.data.shape)

    return _make(out, (a, gain, bias), (grad_a, grad_gain, grad_bias))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), (lambda g: g.reshape(a.data.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    out = np.swapaxes(a.data, ax1, ax2)
    return _make(out, (a,), (lambda g: np.swapaxes(g, ax1, ax2),))


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    out = np.broadcast_to(a.data, shape)
    # broadcast_to returns a read-only view; materialise so downstream
    # in-place consumers cannot trip on it.
    return _make(np.array(out), (a,), (lambda g: _unbroadcast(g, a.data.shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.data.shape for t in tensors]}") from e
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_grad(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _make(out, tuple(tensors), tuple(make_grad(i) for i in range(len(tensors))))


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    out = a.data[idx]

    def grad_a(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return full

    return _make(np.array(out), (a,), (grad_a,))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_a(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for ax_i in sorted(ax):
                g = np.expand_dims(g, ax_i)
        return np.broadcast_to(g, a.data.shape).copy()

    return _make(out, (a,), (grad_a,))


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i] for i in ax]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def gather(a, index: np.ndarray, axis: int = -1) -> Tensor:
    """Pick one entry per row along `axis` (Q(s, a) selection)."""
    a = _wrap(a)
    idx = np.asarray(index, dtype=np.int64)
    idx_exp = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_exp, axis=axis)

    def grad_a(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx_exp, g, axis=axis)
        return full

    return _make(np.squeeze(out, axis=axis), (a,),
                 (lambda g: grad_a(np.expand_dims(g, axis)),))


def attention(q, k, v) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    q, k, v: (..., T, dh). Composed from matmul / scale / softmax so each
    piece keeps its analytic gradient.
    """
    dh = q.shape[-1]
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    return matmul(softmax(scores, axis=-1), v)


# -- backward ------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable grad tensor.

    The seed must be scalar-valued: gradients of vector outputs are ambiguous
    without a co-vector.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward: seed output must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    loss._grad_owned = True
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, fn in zip(node._parents, node._grad_fns):
            if not parent.requires_grad:
                continue
            contrib = fn(g)
            if parent.grad is None:
                # First contribution may alias another node's buffer; only
                # mutate in place once we own a freshly allocated array.
                parent.grad = contrib
                parent._grad_owned = False
            elif parent._grad_owned:
                parent.grad += contrib
            else:
                parent.grad = parent.grad + contrib
                parent._grad_owned = True
        if node._parents:
            node.grad = None  # free intermediate storage early
            node._grad_owned = False


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
        t._grad_owned = False


# -- finite differences ---------------------------------------------------


def finite_diff_check(loss_fn, tensors, h: float = 1e-5, max_coords_per_tensor: int | None = None,
                      rng: np.random.Generator | None = None):
    """Compare analytic gradients of `loss_fn` against central differences.

    `loss_fn` must rebuild the graph from the current tensor values and
    return a scalar Tensor. Checks every coordinate unless
    `max_coords_per_tensor` caps the per-tensor sample (uniform, seeded).

    Returns a report dict with the worst coordinate:
    {"max_rel_error", "worst": (name, index, analytic, numeric), "checked"}.
    Relative error uses |a - n| / max(|a|, |n|); coordinates where both
    gradients are below 1e-6 are compared absolutely against 1e-7 instead
    (the ratio of two rounding-level numbers is meaningless).
    """
    tensors = list(tensors)
    zero_grads(tensors)
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst = ("", (), 0.0, 0.0)
    max_rel = 0.0
    checked = 0
    for t, an in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n_coords = flat.size
        if max_coords_per_tensor is not None and n_coords > max_coords_per_tensor:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n_coords, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(n_coords)
        an_flat = an.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            lp = loss_fn().item()
            flat[c] = orig - h
            lm = loss_fn().item()
            flat[c] = orig
            num = (lp - lm) / (2.0 * h)
            a = an_flat[c]
            scale = max(abs(a), abs(num))
            if scale < 1e-6:
                rel = 0.0 if abs(a - num) < 1e-7 else abs(a - num) / 1e-6
            else:
                rel = abs(a - num) / scale
            checked += 1
            if rel > max_rel:
                max_rel = rel
                idx = np.unravel_index(c, t.data.shape)
                worst = (t.name or "<unnamed>", idx, float(a), float(num))
    return {"max_rel_error": max_rel, "worst": worst, "checked": checked}
