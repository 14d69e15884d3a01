"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous row-major numpy array (float32 or float64)
and optionally participates in a dynamically built computation graph.
Calling ``backward(loss)`` on a scalar walks the graph in reverse
topological order and accumulates gradients into every leaf tensor
created with ``requires_grad=True``.

Conventions:
  - binary ops require matching dtypes, so 32/64-bit mixing fails loudly
    instead of silently promoting;
  - every op checks its output for NaN/Inf and raises NumericError naming
    the op that produced it;
  - graph construction can be suspended with the ``no_grad()`` context,
    which is what inference and benchmarking use.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import ConfigError, ContractError, DomainError, NumericError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Suspend graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense numeric array with optional gradient accumulation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise ContractError("wrap raw array data, not another Tensor")
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in the given dtype (graph history is not carried over)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), _as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)

    # convenience unary aliases
    def tanh(self):
        return apply_unary(self, "tanh")

    def sigmoid(self):
        return apply_unary(self, "sigmoid")

    def softplus(self):
        return apply_unary(self, "softplus")

    def exp(self):
        return apply_unary(self, "exp")

    def log1p(self):
        return apply_unary(self, "log1p")

    def silu(self):
        return apply_unary(self, "silu")

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# -- graph plumbing ----------------------------------------------------------


def make_op(name: str, data: np.ndarray, parents, bwd) -> Tensor:
    """Create a graph node.

    ``bwd(grad_out)`` must return one gradient array (or None) per parent.
    All ops funnel through here so the finite-output invariant is enforced
    in one place.
    """
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{name}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._bwd = bwd
    else:
        out._parents = ()
        out._bwd = None
    return out


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(name, a: Tensor, b: Tensor):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(
            f"{name}: dtype mismatch {a.data.dtype.name} vs {b.data.dtype.name}"
        )


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    Repeated calls accumulate; clear with ``zero_grad`` (or an optimizer's
    ``zero_grad``) between steps.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    # iterative post-order DFS: parents precede consumers in `topo`
    topo = []
    visited = set()
    stack = [(loss, False)]
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

    adjoint = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            parent_grads = node._bwd(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                acc = adjoint.get(id(parent))
                adjoint[id(parent)] = pg if acc is None else acc + pg
        elif node.requires_grad:
            node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g



# -- arithmetic --------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    a = _as_tensor(a, b.dtype)
    _check_same_dtype("add", a, b)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op("add", data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    a = _as_tensor(a, b.dtype)
    _check_same_dtype("mul", a, b)
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_op("mul", data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  ``a`` may carry leading batch axes; ``b`` is 2-D."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ContractError("matmul expects Tensor operands")
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim != 2:
        raise ShapeError(f"matmul: need (..,m,k) @ (k,n), got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, b.shape[1])
        gb = a2.T @ g2
        return ga, gb

    return make_op("matmul", data, (a, b), bwd)


# -- elementwise unary functions ---------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


# name -> (forward, grad(x_data, y_data), optional domain check)
UNARY_FNS = {
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y, None),
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y), None),
    "softplus": (_softplus, lambda x, y: _sigmoid(x), None),
    "exp": (np.exp, lambda x, y: y, None),
    "log1p": (np.log1p, lambda x, y: 1.0 / (1.0 + x), "x > -1"),
    "silu": (lambda x: x * _sigmoid(x), lambda x, y: _silu_grad(x), None),
}


def apply_unary(x: Tensor, fn: str) -> Tensor:
    """Apply a registered elementwise function with its derivative."""
    if fn not in UNARY_FNS:
        raise ContractError(f"unknown unary fn {fn!r}; have {sorted(UNARY_FNS)}")
    f, df, domain = UNARY_FNS[fn]
    if domain == "x > -1" and np.any(x.data <= -1.0):
        raise DomainError("log1p: input must be > -1")
    with np.errstate(over="ignore", invalid="ignore"):
        data = f(x.data)

    def bwd(g):
        return (g * df(x.data, data),)

    return make_op(fn, data, (x,), bwd)


def tanh(x):
    return apply_unary(x, "tanh")


def sigmoid(x):
    return apply_unary(x, "sigmoid")


def softplus(x):
    return apply_unary(x, "softplus")


def exp(x):
    return apply_unary(x, "exp")


def log1p(x):
    return apply_unary(x, "log1p")


def silu(x):
    return apply_unary(x, "silu")


# -- reductions and shape ops ------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(x.dtype, copy=True),)

    return make_op("sum", np.asarray(data), (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), float(1.0 / n))


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return make_op("reshape", data, (x,), bwd)


def flip(x: Tensor, axis: int) -> Tensor:
    data = np.flip(x.data, axis=axis).copy()

    def bwd(g):
        return (np.flip(g, axis=axis),)

    return make_op("flip", data, (x,), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    for t in tensors[1:]:
        _check_same_dtype("concat", tensors[0], t)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))

    return make_op("concat", data, tuple(tensors), bwd)


# -- composite layers with analytic backwards --------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return make_op("softmax", data, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _check_same_dtype("layer_norm", x, gamma)
    _check_same_dtype("layer_norm", x, beta)
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm: empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        n = x.shape[-1]
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx.astype(x.dtype, copy=False), ggamma, gbeta

    return make_op("layer_norm", data, (x, gamma, beta), bwd)


MAX_CONV_KERNEL = 256


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Causal per-channel convolution.

    ``x`` is (..., T, C), ``kernel`` is (k, C); output[t, c] sums
    kernel[j, c] * x[t - j, c] with zero left-padding, so tap 0 reads the
    current sample and the output never looks ahead.  Sequences shorter
    than the kernel are fine (missing history is zero); absurd kernel
    widths are a config error.
    """
    _check_same_dtype("depthwise_conv1d", x, kernel)
    if kernel.ndim != 2:
        raise ShapeError(f"depthwise_conv1d: kernel must be (k, C), got {kernel.shape}")
    k, c = kernel.shape
    t = x.shape[-2]
    if x.shape[-1] != c:
        raise ShapeError(f"depthwise_conv1d: channel mismatch {x.shape} vs {kernel.shape}")
    if k < 1 or k > MAX_CONV_KERNEL:
        raise ConfigError(f"depthwise_conv1d: kernel width {k} outside [1, {MAX_CONV_KERNEL}]")

    pad = [(0, 0)] * (x.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad)
    data = np.zeros_like(x.data)
    for j in range(k):
        data += kernel.data[j] * xp[..., k - 1 - j : k - 1 - j + t, :]

    def bwd(g):
        gk = np.zeros_like(kernel.data)
        for j in range(k):
            gk[j] = (g * xp[..., k - 1 - j : k - 1 - j + t, :]).reshape(-1, c).sum(axis=0)
        gpad = [(0, 0)] * (x.ndim - 2) + [(0, k - 1), (0, 0)]
        gp = np.pad(g, gpad)
        gx = np.zeros_like(x.data)
        for j in range(k):
            gx += kernel.data[j] * gp[..., j : j + t, :]
        return gx, gk

    return make_op("depthwise_conv1d", data, (x, kernel), bwd)
