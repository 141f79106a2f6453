"""Minimal dense-tensor arithmetic with reverse-mode differentiation.

Everything is float64 numpy under the hood. Each operation records the
parent links and a backward closure on its output tensor; ``backward``
walks the resulting graph in reverse topological order (the ``Tape``),
accumulating gradients additively into ``requires_grad`` leaves.

Scope is exactly what the facet model needs: 1-D/2-D tensors, numpy-style
broadcasting for elementwise ops, and a handful of composites (softmax,
layer norm, scaled dot-product attention). No GPU, no fusion.
"""

from contextlib import contextmanager

import numpy as np

from .errors import ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    """A numpy array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    # -- introspection -------------------------------------------------
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
        return float(self.data)

    def numpy(self):
        return self.data

    def is_leaf(self):
        return not self._parents

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction --------------------------------------------
    @staticmethod
    def _make(data, parents, backward):
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if track:
            return Tensor(data, requires_grad=True, _parents=tuple(parents),
                          _backward=backward)
        return Tensor(data)

    # -- elementwise arithmetic ------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        out_data = self.data + other.data

        def bw(g, grads, a=self, b=other):
            _acc(grads, a, _unbroadcast(g, a.shape))
            _acc(grads, b, _unbroadcast(g, b.shape))

        return Tensor._make(out_data, (self, other), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        out_data = self.data - other.data

        def bw(g, grads, a=self, b=other):
            _acc(grads, a, _unbroadcast(g, a.shape))
            _acc(grads, b, _unbroadcast(-g, b.shape))

        return Tensor._make(out_data, (self, other), bw)

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __neg__(self):
        def bw(g, grads, a=self):
            _acc(grads, a, -g)

        return Tensor._make(-self.data, (self,), bw)

    def __mul__(self, other):
        other = _as_tensor(other)
        out_data = self.data * other.data

        def bw(g, grads, a=self, b=other):
            _acc(grads, a, _unbroadcast(g * b.data, a.shape))
            _acc(grads, b, _unbroadcast(g * a.data, b.shape))

        return Tensor._make(out_data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        out_data = self.data / other.data

        def bw(g, grads, a=self, b=other):
            _acc(grads, a, _unbroadcast(g / b.data, a.shape))
            _acc(grads, b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._make(out_data, (self, other), bw)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** exponent

        def bw(g, grads, a=self, e=exponent):
            _acc(grads, a, g * e * a.data ** (e - 1))

        return Tensor._make(out_data, (self,), bw)

    # -- linear algebra ---------------------------------------------------
    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        if a.ndim not in (1, 2) or b.ndim not in (1, 2):
            raise ShapeError(f"matmul supports 1-D/2-D, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        out_data = a.data @ b.data

        def bw(g, grads, a=a, b=b):
            if a.ndim == 2 and b.ndim == 2:
                _acc(grads, a, g @ b.data.T)
                _acc(grads, b, a.data.T @ g)
            elif a.ndim == 1 and b.ndim == 2:
                _acc(grads, a, b.data @ g)
                _acc(grads, b, np.outer(a.data, g))
            elif a.ndim == 2 and b.ndim == 1:
                _acc(grads, a, np.outer(g, b.data))
                _acc(grads, b, a.data.T @ g)
            else:  # dot product
                _acc(grads, a, g * b.data)
                _acc(grads, b, g * a.data)

        return Tensor._make(out_data, (a, b), bw)

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError("transpose requires a 2-D tensor")

        def bw(g, grads, a=self):
            _acc(grads, a, g.T)

        return Tensor._make(self.data.T, (self,), bw)

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g, grads, a=self, axis=axis, keepdims=keepdims):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(grads, a, np.broadcast_to(g, a.shape).copy())

        return Tensor._make(out_data, (self,), bw)

    def mean(self, axis=None, keepdims=False):
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, shape):
        out_data = self.data.reshape(shape)

        def bw(g, grads, a=self):
            _acc(grads, a, g.reshape(a.shape))

        return Tensor._make(out_data, (self,), bw)

    # -- indexing -------------------------------------------------------------
    def __getitem__(self, idx):
        out_data = self.data[idx]

        def bw(g, grads, a=self, idx=idx):
            buf = np.zeros_like(a.data)
            buf[idx] = g
            _acc(grads, a, buf)

        return Tensor._make(out_data, (self,), bw)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(grads, t, g):
    if not t.requires_grad:
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def param(data):
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data):
    return Tensor(data)


# ---------------------------------------------------------------------------
# unary / composite operations
# ---------------------------------------------------------------------------

def exp(x):
    out_data = np.exp(x.data)

    def bw(g, grads, a=x, o=out_data):
        _acc(grads, a, g * o)

    return Tensor._make(out_data, (x,), bw)


def sqrt(x):
    out_data = np.sqrt(x.data)

    def bw(g, grads, a=x, o=out_data):
        _acc(grads, a, g * 0.5 / o)

    return Tensor._make(out_data, (x,), bw)


def tanh(x):
    out_data = np.tanh(x.data)

    def bw(g, grads, a=x, o=out_data):
        _acc(grads, a, g * (1.0 - o * o))

    return Tensor._make(out_data, (x,), bw)


def sigmoid(x):
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g, grads, a=x, o=out_data):
        _acc(grads, a, g * o * (1.0 - o))

    return Tensor._make(out_data, (x,), bw)


def relu(x):
    mask = x.data > 0

    def bw(g, grads, a=x, mask=mask):
        _acc(grads, a, g * mask)

    return Tensor._make(x.data * mask, (x,), bw)


def clamp01(x):
    """min(1, max(0, x)) with subgradient 0 at and beyond the boundaries."""
    mask = (x.data > 0.0) & (x.data < 1.0)

    def bw(g, grads, a=x, mask=mask):
        _acc(grads, a, g * mask)

    return Tensor._make(np.clip(x.data, 0.0, 1.0), (x,), bw)


def softmax(x, axis=-1):
    if x.size == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    # constant shift; softmax is exactly invariant to it
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    z = exp(x - shift)
    return z / z.sum(axis=axis, keepdims=True)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply the affine parameters."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    xhat = centered / sqrt(var + eps)
    return xhat * gain + bias


def dropout(x, p, rng):
    """Inverted dropout: scales at train time so inference is identity.

    Pass ``rng=None`` (or p=0) for the identity/eval path.
    """
    if rng is None or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout probability must be < 1")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bw(g, grads, parts=tuple(tensors), sizes=tuple(sizes), axis=axis):
        start = 0
        for t, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            _acc(grads, t, g[tuple(sl)])
            start += size

    return Tensor._make(out_data, tuple(tensors), bw)


def embedding(table, ids):
    """Gather rows ``ids`` from a 2-D table; grads scatter-add back."""
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def bw(g, grads, a=table, ids=ids):
        buf = np.zeros_like(a.data)
        np.add.at(buf, ids, g)
        _acc(grads, a, buf)

    return Tensor._make(out_data, (table,), bw)


def scaled_dot_attention(q, k, v):
    """softmax(q kᵀ / √d_head) v for 2-D (seq, d_head) operands."""
    d_head = k.shape[-1]
    scores = (q @ k.T) / float(np.sqrt(d_head))
    return softmax(scores, axis=-1) @ v


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class Tape:
    """Reverse-topologically ordered record of the ops reaching ``root``.

    Built on demand by ``backward``; each recorded node appears exactly
    once, so a single traversal propagates every gradient contribution.
    """

    def __init__(self, root):
        self.nodes = self._topo(root)

    @staticmethod
    def _topo(root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order


def backward(loss):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Repeated calls without ``zero_grad`` accumulate. Returns the Tape for
    introspection.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    tape = Tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g, grads)
        elif node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
    return tape


def zero_grad(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------

def gradient_check(f, theta, eps=1e-6, num_coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a 1-D Tensor to a scalar Tensor and must be deterministic
    (dropout off). Checks every coordinate unless ``num_coords`` asks for a
    random subset drawn from ``rng``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    leaf = param(theta.copy())
    out = f(leaf)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("loss is not finite at theta")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(theta)
    if not np.isfinite(analytic).all():
        raise FloatingPointError("analytic gradient is not finite")

    coords = np.arange(theta.size)
    if num_coords is not None and num_coords < theta.size:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(theta.size, size=num_coords, replace=False)

    max_rel = 0.0
    flat = analytic.reshape(-1)
    with no_grad():
        for idx in coords:
            plus = theta.copy().reshape(-1)
            plus[idx] += eps
            minus = theta.copy().reshape(-1)
            minus[idx] -= eps
            f_plus = float(f(Tensor(plus.reshape(theta.shape))).data)
            f_minus = float(f(Tensor(minus.reshape(theta.shape))).data)
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("loss is not finite near theta")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = flat[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            max_rel = max(max_rel, rel)
    return max_rel
