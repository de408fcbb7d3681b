"""Small dense tensor engine with reverse-mode differentiation.

Tensors are numpy arrays of rank <= 3 plus a recorded backward closure.
Only the operations the recommender needs are provided; broadcasting is
limited to adding a trailing-shape bias (``add_broadcast``).
"""

import contextlib
import os
import threading

import numpy as np

from . import kernels
from .errors import ConfigurationError

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = _PRECISIONS[os.environ.get("SASREC_PRECISION", "float32")]
_local = threading.local()


def get_dtype():
    return _dtype


def set_precision(name):
    global _dtype
    if name not in _PRECISIONS:
        raise ConfigurationError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


@contextlib.contextmanager
def precision(name):
    old = _dtype
    set_precision(name)
    try:
        yield
    finally:
        set_precision(np.dtype(old).name)


def grad_enabled():
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    old = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_retain", "_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or _dtype)
        if arr.ndim > 3:
            raise ConfigurationError(f"tensor rank {arr.ndim} exceeds 3")
        if any(e < 1 for e in arr.shape):
            raise ConfigurationError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._retain = False
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def retain_grad(self):
        """Keep the gradient of a non-leaf tensor after ``backward``."""
        self._retain = True
        return self

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul_const(self, -1.0)


def _result(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._retain = False
    out._done = False
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward_fn if track else None
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The graph is released afterwards; a second call on the same loss raises.
    """
    if loss._done:
        raise RuntimeError("backward already ran on this graph; recompute the forward pass first")
    if loss.data.size != 1:
        raise ConfigurationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            grads[k] = pg if k not in grads else grads[k] + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._done = True
    loss._done = True


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def add_broadcast(x, bias):
    """x + bias where bias matches the trailing extents of x."""
    k = bias.ndim
    if x.shape[x.ndim - k:] != bias.shape:
        raise ConfigurationError(f"add_broadcast: bias {bias.shape} does not match tail of {x.shape}")

    def bw(g):
        return g, g.reshape((-1,) + bias.shape).sum(axis=0)

    return _result(x.data + bias.data, (x, bias), bw)


def mul(a, b):
    if a.shape != b.shape:
        raise ConfigurationError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def mul_const(x, c):
    c = np.asarray(c, dtype=x.data.dtype)
    if c.ndim and c.shape != x.shape:
        raise ConfigurationError(f"mul_const: constant shape {c.shape} vs {x.shape}")
    return _result(x.data * c, (x,), lambda g: (g * c,))


def matmul(a, b, transpose_b=False):
    """2-D product, batched 3-D x 2-D (weight), or batched 3-D x 3-D.

    With ``transpose_b`` the last two axes of ``b`` are swapped first.
    """
    bd = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if a.ndim not in (2, 3) or bd.ndim not in (2, 3) or (a.ndim == 2 and bd.ndim == 3):
        raise ConfigurationError(f"matmul: unsupported ranks {a.shape} x {b.shape}")
    if a.shape[-1] != bd.shape[-2] or (bd.ndim == 3 and a.shape[0] != bd.shape[0]):
        raise ConfigurationError(f"matmul: shape mismatch {a.shape} x {b.shape}"
                                 f"{' (transposed)' if transpose_b else ''}")
    q = a.shape[-1]
    if a.ndim == 3 and bd.ndim == 2:
        out = (a.data.reshape(-1, q) @ bd).reshape(a.shape[:-1] + (bd.shape[-1],))
    else:
        out = a.data @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if a.ndim == 3 and bd.ndim == 2:
            gbd = a.data.reshape(-1, q).T @ g.reshape(-1, g.shape[-1])
        else:
            gbd = np.swapaxes(a.data, -1, -2) @ g
        return ga, (np.swapaxes(gbd, -1, -2) if transpose_b else gbd)

    return _result(out, (a, b), bw)


def relu(x):
    on = x.data > 0
    return _result(np.where(on, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * on,))


def softmax_rows(x, valid_mask, allow_empty=False):
    """Softmax over the last axis restricted to ``valid_mask``; masked entries are exactly 0.

    Rows without any valid entry raise unless ``allow_empty``, in which case
    they come out all zero (and pass no gradient).
    """
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if valid_mask.shape != x.shape:
        raise ConfigurationError(f"softmax_rows: mask {valid_mask.shape} vs input {x.shape}")
    if not allow_empty and not valid_mask.any(axis=-1).all():
        raise ConfigurationError("softmax_rows: a row has no valid entries (padding contract violated)")
    y = kernels.masked_softmax(x.data, valid_mask)
    return _result(y, (x,), lambda g: (kernels.softmax_backward(y, g),))


def layer_norm(x, alpha, beta, eps):
    if eps <= 0:
        raise ConfigurationError("layer_norm: epsilon must be positive")
    d = x.shape[-1]
    if alpha.shape != (d,) or beta.shape != (d,):
        raise ConfigurationError(f"layer_norm: scale/bias must have shape ({d},)")
    x2 = x.data.reshape(-1, d)
    y, xhat, rstd = kernels.layer_norm_forward(x2, alpha.data, beta.data, eps)

    def bw(g):
        gx, ga, gb = kernels.layer_norm_backward(g.reshape(-1, d), xhat, rstd, alpha.data)
        return gx.reshape(x.shape), ga, gb

    return _result(y.reshape(x.shape), (x, alpha, beta), bw)


def dropout(x, p, train, rng):
    """Inverted dropout: survivors are scaled by 1/(1-p) in training, eval is identity."""
    if not 0 <= p < 1:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def embedding(table, idx):
    """Rows of ``table`` selected by the integer array ``idx``."""
    idx = np.asarray(idx)
    nrows, d = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= nrows):
        raise ConfigurationError(f"embedding: index out of range [0, {nrows})")
    out = table.data[idx]

    def bw(g):
        return (kernels.scatter_add_rows(idx.reshape(-1), g.reshape(-1, d), nrows),)

    return _result(out, (table,), bw)


def split_heads(x, heads):
    """(B, n, d) -> (B*heads, n, d/heads)."""
    bsz, n, d = x.shape
    if d % heads:
        raise ConfigurationError(f"heads={heads} does not divide d={d}")
    dh = d // heads
    out = x.data.reshape(bsz, n, heads, dh).transpose(0, 2, 1, 3).reshape(bsz * heads, n, dh)

    def bw(g):
        return (g.reshape(bsz, heads, n, dh).transpose(0, 2, 1, 3).reshape(bsz, n, d),)

    return _result(out, (x,), bw)


def merge_heads(x, heads):
    """(B*heads, n, dh) -> (B, n, heads*dh); inverse of ``split_heads``."""
    bh, n, dh = x.shape
    bsz = bh // heads
    out = x.data.reshape(bsz, heads, n, dh).transpose(0, 2, 1, 3).reshape(bsz, n, heads * dh)

    def bw(g):
        return (g.reshape(bsz, n, heads, dh).transpose(0, 2, 1, 3).reshape(bh, n, dh),)

    return _result(out, (x,), bw)


def sum_last(x):
    return _result(x.data.sum(axis=-1), (x,), lambda g: (np.broadcast_to(g[..., None], x.shape).copy(),))


def total(x):
    """Sum of all elements as a scalar tensor."""
    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                   lambda g: (np.full(x.shape, g, dtype=x.data.dtype),))


def log_sigmoid(x):
    # log(sigma(x)) = -softplus(-x)
    out = -np.logaddexp(0, -x.data)
    return _result(out.astype(x.data.dtype, copy=False), (x,),
                   lambda g: (g * (0.5 * (1 - np.tanh(0.5 * x.data))),))
