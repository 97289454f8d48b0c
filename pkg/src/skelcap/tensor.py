"""Minimal dense-tensor library with reverse-mode autodiff.

Everything is float64 and numpy-backed. Each op builds a node in an implicit
compute graph (parent links + a backward closure); ``backward`` topologically
sorts the reachable subgraph and accumulates gradients. Forward outputs are
checked for NaN/Inf after every op.
"""

from __future__ import annotations

import numpy as np

# Additive-mask surrogate for "blocked": large enough that exp() underflows
# to exactly 0.0 after max-subtraction, small enough not to overflow.
NEG_INF = -1e9

# Toggled off only in tight benchmark loops; tests rely on it being on.
CHECK_FINITE = True


class TensorError(ValueError):
    """Base class for tensor contract violations."""


class ShapeError(TensorError):
    pass


class FiniteError(TensorError):
    """An op produced NaN or Inf."""


class MaskError(TensorError):
    """An attention query row had every key position blocked."""


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf"):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = None
        self._op = _op
        if CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise FiniteError(f"non-finite values out of op '{_op}'")

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

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data.copy())

    # -- autodiff ------------------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        backward(self)

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_wrap(other), power(self, -1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)

    # -- convenience method forms --------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents), _op=op)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _node(a.data + b.data, (a, b), "add")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out._backward = bwd
    return out


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _node(a.data * b.data, (a, b), "mul")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = bwd
    return out


def power(a, exponent):
    a = _wrap(a)
    exponent = float(exponent)
    out = _node(a.data**exponent, (a,), f"pow{exponent}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    out._backward = bwd
    return out


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = _node(np.matmul(a.data, b.data), (a, b), "matmul")

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    out._backward = bwd
    return out


def relu(a):
    a = _wrap(a)
    out = _node(np.maximum(a.data, 0.0), (a,), "relu")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    out._backward = bwd
    return out


def exp(a):
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = _node(np.exp(a.data), (a,), "exp")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * out.data)

    out._backward = bwd
    return out


def log(a):
    a = _wrap(a)
    out = _node(np.log(a.data), (a,), "log")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    out._backward = bwd
    return out


def sqrt(a):
    return power(a, 0.5)


def sigmoid(a):
    a = _wrap(a)
    # stable: sigma(x) = exp(-|x|-ish) arrangement via tanh identity
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = _node(out_data, (a,), "sigmoid")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * out.data * (1.0 - out.data))

    out._backward = bwd
    return out


def softplus(a):
    a = _wrap(a)
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    out = _node(out_data, (a,), "softplus")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 * (1.0 + np.tanh(0.5 * a.data)))

    out._backward = bwd
    return out


def reduce_sum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    out._backward = bwd
    return out


def reduce_mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = _wrap(a)
    out = _node(a.data.reshape(shape), (a,), "reshape")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    out._backward = bwd
    return out


def transpose(a, axes):
    a = _wrap(a)
    axes = tuple(axes)
    out = _node(a.data.transpose(axes), (a,), "transpose")
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    out._backward = bwd
    return out


def concat(tensors, axis):
    tensors = [_wrap(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    out._backward = bwd
    return out


def take_slice(a, key):
    a = _wrap(a)
    out = _node(a.data[key], (a,), "slice")

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a._accumulate(full)

    out._backward = bwd
    return out


def take_along_last(a, idx):
    """Gather ``a[..., idx]`` along the last axis; idx shape = a.shape[:-1]."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} != leading shape {a.shape[:-1]}")
    expanded = idx[..., None]
    out = _node(np.take_along_axis(a.data, expanded, axis=-1)[..., 0], (a,), "gather")

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.put_along_axis(full, expanded, g[..., None], axis=-1)
            a._accumulate(full)

    out._backward = bwd
    return out


def embedding(weight, ids):
    """Row lookup into ``weight`` [V, d] with an integer id array."""
    weight = _wrap(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding ids out of range for vocab {weight.shape[0]}")
    out = _node(weight.data[ids], (weight,), "embedding")

    def bwd(g):
        if weight.requires_grad:
            full = np.zeros_like(weight.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
            weight._accumulate(full)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# composite ops
# ---------------------------------------------------------------------------


def softmax(a, axis=-1):
    a = _wrap(a)
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    out = _node(out_data, (a,), "softmax")

    def bwd(g):
        if a.requires_grad:
            s = out.data
            dot = (g * s).sum(axis=axis, keepdims=True)
            a._accumulate(s * (g - dot))

    out._backward = bwd
    return out


def log_softmax(a, axis=-1):
    a = _wrap(a)
    if a.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _node(shifted - lse, (a,), "log_softmax")

    def bwd(g):
        if a.requires_grad:
            soft = np.exp(out.data)
            a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    out._backward = bwd
    return out


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = _wrap(x)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over an empty last dimension")
    if eps <= 0:
        raise ShapeError("layer_norm eps must be > 0")
    gamma, beta = _wrap(gamma), _wrap(beta)
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"gamma/beta must have shape ({d},)")
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = reduce_mean(centered * centered, axis=-1, keepdims=True)
    norm = centered * power(var + eps, -0.5)
    return norm * gamma + beta


def masked_attention(q, k, v, mask, heads, return_weights=False):
    """Scaled dot-product attention with an additive mask, split into heads.

    q, k, v: [..., T, d_model]; mask broadcastable to [..., heads, Tq, Tk]
    with 0 for visible and NEG_INF for blocked. Blocked positions receive
    exactly zero weight; a fully blocked query row is a contract violation.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    d_model = q.shape[-1]
    if d_model % heads != 0:
        raise ShapeError(f"heads={heads} must divide d_model={d_model}")
    mask_data = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if np.all(mask_data <= NEG_INF / 2, axis=-1).any():
        raise MaskError("attention query row with all key positions blocked")

    d_head = d_model // heads
    tq, tk = q.shape[-2], k.shape[-2]
    lead = q.shape[:-2]

    def split(t, tlen):
        # [..., T, d_model] -> [..., heads, T, d_head]
        r = reshape(t, lead + (tlen, heads, d_head))
        perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return transpose(r, perm)

    qh, kh, vh = split(q, tq), split(k, tk), split(v, tk)
    kt = transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2))
    scores = matmul(qh, kt) * (1.0 / np.sqrt(d_head))
    scores = scores + Tensor(mask_data)
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, vh)
    perm_back = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    out = reshape(transpose(ctx, perm_back), lead + (tq, d_model))
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def topo_order(root):
    """Topologically ordered node list of the graph reachable from ``root``."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate gradients of a scalar ``loss`` into all requires_grad tensors."""
    if loss.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.requires_grad and node.grad is not None:
            node._backward(node.grad)
