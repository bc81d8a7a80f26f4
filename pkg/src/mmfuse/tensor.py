"""Dense float64 tensors with tape-ordered reverse-mode differentiation.

Every primitive records itself with a monotonically increasing sequence
number. ``backward`` replays the reachable records in exactly the reverse of
that order, so gradients are deterministic and fan-out accumulates.
"""
import contextlib
import itertools
import math

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "DimensionError", "ContractError", "GradCheckError",
    "tensor", "parameter", "no_grad", "is_grad_enabled",
    "matmul", "add", "sub", "mul", "scale", "sigmoid", "relu", "tanh", "exp",
    "softmax_rows", "layer_norm", "concat", "reshape", "transpose",
    "tsum", "mean", "embedding", "masked_mean_rows", "cross_entropy",
    "backward", "grad_check", "graph_nodes",
]

LN_EPS = 1e-5

_seq = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition of the autodiff contract was violated."""


class GradCheckError(ArithmeticError):
    """A finite-difference probe produced a non-finite value."""

    def __init__(self, index, message):
        super().__init__(f"coordinate {index}: {message}")
        self.index = index


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_op", "name",
                 "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self._op = "leaf"
        self.name = name
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() on tensor of shape {self.shape}")

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    out._seq = next(_seq)
    out._op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), back, "mul")


def scale(a, c):
    c = float(c)

    def back(g):
        return (g * c,)

    return _make(a.data * c, (a,), back, "scale")


def sigmoid(x):
    x = _as_tensor(x)
    # branch-free stable form: exp of a non-positive argument only
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), back, "sigmoid")


def relu(x):
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), back, "relu")


def tanh(x):
    y = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - y * y),)

    return _make(y, (x,), back, "tanh")


def exp(x):
    y = np.exp(x.data)

    def back(g):
        return (g * y,)

    return _make(y, (x,), back, "exp")


def softmax_rows(x, bias=None):
    """Softmax over the last axis; ``bias`` is a constant array added first (masking)."""
    x = _as_tensor(x)
    z = x.data if bias is None else x.data + bias
    y = kernels.softmax_lastdim(z)

    def back(g):
        return (kernels.softmax_lastdim_backward(y, g),)

    return _make(y, (x,), back, "softmax")


def layer_norm(x, gain, bias):
    """Normalize each row over the last axis, then apply ``gain``/``bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: width {d} vs gain {gain.shape}, bias {bias.shape}")
    xhat, rstd = kernels.layer_norm_lastdim(x.data, LN_EPS)
    gd = gain.data
    out = xhat * gd + bias.data

    def back(g):
        gx = kernels.layer_norm_lastdim_backward(xhat, rstd, g * gd) if x.requires_grad else None
        flat_g = g.reshape(-1, d)
        ggain = (flat_g * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gbias = flat_g.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), back, "layer_norm")


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, tuple(tensors), back, "concat")


def reshape(x, shape):
    src = x.shape

    def back(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), back, "reshape")


def transpose(x, axes=None):
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.data, axes), (x,), back, "transpose")


def tsum(x, axis=None, keepdims=False):
    src = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back, "sum")


def mean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis), 1.0 / n)


def embedding(table, ids):
    """Gather rows of ``table`` by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding: id out of range [0, {vocab})")
    out = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, (table,), back, "embedding")


def masked_mean_rows(x, mask):
    """Mean over axis -2 of ``x`` (B x n x d) counting only rows where mask is 1."""
    m = np.asarray(mask, dtype=np.float64)
    w = m / np.maximum(m.sum(axis=-1, keepdims=True), 1.0)
    pooled = matmul(Tensor(w[..., None, :]), x)
    return reshape(pooled, x.shape[:-2] + (x.shape[-1],))


def cross_entropy(logits, targets, mask):
    """Mean token cross-entropy over positions where ``mask`` is nonzero.

    ``logits`` is (..., V); ``targets`` integer (...). Returns a scalar tensor.
    """
    z = logits.data
    t = np.asarray(targets, dtype=np.int64)
    m = np.asarray(mask, dtype=np.float64)
    count = m.sum()
    if count <= 0:
        raise ContractError("cross_entropy: no target positions")
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=-1, keepdims=True)
    logp = z - zmax - np.log(s)
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    loss = -(picked * m).sum() / count
    p = e / s

    def back(g):
        gz = p.copy()
        np.put_along_axis(gz, t[..., None], np.take_along_axis(gz, t[..., None], axis=-1) - 1.0, axis=-1)
        return (gz * (m / count)[..., None] * g,)

    return _make(np.asarray(loss), (logits,), back, "cross_entropy")


# ---------------------------------------------------------------- backward

def graph_nodes(root):
    """Non-leaf tensors reachable from ``root``, in recording order."""
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is not None:
            nodes.append(t)
            stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this graph; rebuild it first")
    if not loss.requires_grad:
        raise ContractError("loss is detached from every parameter")
    nodes = graph_nodes(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = parent.grad + pg if parent.grad is not None else np.array(pg, copy=True)
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if loss._backward is None:
        # scalar leaf: its own gradient is one
        loss.grad = loss.grad + 1.0
    for node in nodes:
        node._backward = None
        node._parents = ()
    loss._consumed = True


def grad_check(f, x, h=1e-5):
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic; ``x`` is
    perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    backward(f(x))
    analytic = x.grad.copy()
    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            hi, lo = orig + h, orig - h
            flat[i] = hi
            fp = float(f(x).data)
            flat[i] = lo
            fm = float(f(x).data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(i, f"non-finite value f(x+h)={fp}, f(x-h)={fm}")
            # divide by the step actually representable, not the nominal 2h
            numeric = (fp - fm) / (hi - lo)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a))
            worst = max(worst, err)
    return worst
