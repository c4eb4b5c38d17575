"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Every primitive computes its forward value eagerly and, when any input
requires a gradient, records a closure that maps the output gradient to the
input gradients. ``backward`` walks the recorded graph in reverse
topological order and then releases it, so each forward pass supports a
single backward pass.

Tensors keep the dtype they were created with (float32 by default). Sums
and means accumulate in float64 and cast back, which keeps reductions
deterministic and precise enough for finite-difference checks.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractViolation, DegenerateInputError

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "relu",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "inner_product",
    "cosine_similarity",
    "sum",
    "mean",
    "square",
    "cross_entropy_with_logits",
    "batchnorm",
    "reshape",
    "transpose",
    "take",
]

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))
_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """Dense array with an optional gradient slot."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            # python scalars and lists default to float32; float arrays keep their precision
            keep = isinstance(data, (np.ndarray, np.floating)) and arr.dtype in _FLOATS
            dtype = arr.dtype if keep else np.float32
        self.data = np.array(arr, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = ""

    @classmethod
    def _result(cls, data, parents, backward_fn, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward_fn if track else None
        out._op = op
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self, params=None):
        backward(self, params)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def square(self):
        return square(self)

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
        if isinstance(other, Tensor):
            raise ContractViolation("division is only defined by a scalar constant")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _pair(a, b):
    # constants adopt the dtype of their tensor partner
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    return a, _as_tensor(b, a)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- graph traversal --------------------------------------------------------


def _topological_order(root):
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, params=None):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls. When ``params`` is given, any of
    them left without a gradient (unreachable) receives zeros.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        order = _topological_order(loss)
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = np.array(g, dtype=node.data.dtype)
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
    for p in params or ():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shapes(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shapes(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shapes(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), back, "mul")


def neg(a):
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c):
    """Multiply by a Python scalar constant."""
    c = a.data.dtype.type(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a):
    return Tensor._result(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def relu(a):
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ContractViolation(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ContractViolation(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    a2 = a.data if a.ndim == 2 else a.data[None, :]
    b2 = b.data if b.ndim == 2 else b.data[:, None]

    def back(g):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return Tensor._result(a.data @ b.data, (a, b), back, "matmul")


def reshape(a, shape):
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"cannot reshape {a.shape} into {shape}") from None
    return Tensor._result(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def take(a, indices, axis=0):
    """Gather entries along ``axis``; repeated indices accumulate in backward."""
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size and (indices.min() < -a.shape[axis] or indices.max() >= a.shape[axis]):
        raise ContractViolation(f"take: index out of range for axis {axis} of size {a.shape[axis]}")

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._result(np.take(a.data, indices, axis=axis), (a,), back, "take")


# -- reductions -------------------------------------------------------------


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    return Tensor._result(np.asarray(data), (a,), lambda g: (_expand(g, a.shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    if count == 0:
        raise ContractViolation("mean of an empty tensor")
    data = (np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64) / count).astype(a.dtype)
    inv = a.dtype.type(1.0 / count)
    return Tensor._result(np.asarray(data), (a,), lambda g: (_expand(g * inv, a.shape, axis, keepdims),), "mean")


def inner_product(a, b, axis=-1):
    return sum(mul(a, b), axis=axis)


# -- normalisation and probabilities ---------------------------------------


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (a,), back, "softmax")


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(y, (a,), back, "log_softmax")


def l2_normalize(a, axis=-1, eps=1e-12):
    """Scale rows to unit length: ``x / (||x|| + eps)``.

    With ``eps=0`` a zero-norm row raises DegenerateInputError instead.
    """
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if eps == 0 and np.any(norm == 0):
        raise DegenerateInputError("l2_normalize: zero-norm input")
    denom = norm + a.dtype.type(eps)
    y = a.data / denom

    def back(g):
        safe = np.where(norm > 0, norm, 1)
        coef = (a.data * g).sum(axis=axis, keepdims=True) / (safe * denom * denom)
        return (g / denom - a.data * coef,)

    return Tensor._result(y, (a,), back, "l2_normalize")


def cosine_similarity(a, b, axis=-1, eps=1e-12):
    return inner_product(l2_normalize(a, axis, eps), l2_normalize(b, axis, eps), axis)


def cross_entropy_with_logits(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractViolation(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractViolation("cross_entropy: label outside the logit range")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = np.asarray(-np.sum(logp[rows, labels], dtype=np.float64) / n, dtype=logits.dtype)

    def back(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return Tensor._result(loss, (logits,), back, "cross_entropy")


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-feature batch normalisation of an ``(N, F)`` input.

    In training mode batch statistics are used and the running arrays are
    updated in place; otherwise the running statistics normalise the input.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ContractViolation(f"batchnorm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    dt = x.dtype
    if training:
        n = x.shape[0]
        if n == 0:
            raise ContractViolation("batchnorm: empty batch")
        mu = np.mean(x.data, axis=0, dtype=np.float64)
        var = np.mean((x.data - mu) ** 2, axis=0, dtype=np.float64)
        unbiased = var * n / (n - 1) if n > 1 else var
        running_mean[...] = (1 - momentum) * running_mean + momentum * mu
        running_var[...] = (1 - momentum) * running_var + momentum * unbiased
        mu, var = mu.astype(dt), var.astype(dt)
    else:
        mu, var = running_mean.astype(dt), running_var.astype(dt)
    inv_std = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = (x.data - mu) * inv_std
    y = gamma.data * xhat + beta.data

    def back(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        if training:
            n = x.shape[0]
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return Tensor._result(y, (x, gamma, beta), back, "batchnorm")


# -- verification -----------------------------------------------------------


def grad_check(f, x, eps=1e-6, coords=None):
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` to central differences.

    Everything is evaluated in float64. Returns the largest per-coordinate
    ``|analytic - numeric| / max(1, |numeric|)``, over ``coords`` (flat
    indices) when given, otherwise over every coordinate.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(x0, requires_grad=True, dtype=np.float64)
    out = f(probe)
    if out.data.size != 1:
        raise ContractViolation("grad_check needs a scalar-valued function")
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    coords = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.intp).reshape(-1)
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(x0, dtype=np.float64)).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(x0, dtype=np.float64)).data)
            flat[i] = orig
            numeric.flat[i] = (fp - fm) / (2 * eps)
    if coords.size == 0:
        return 0.0
    a, n = analytic.reshape(-1)[coords], numeric.reshape(-1)[coords]
    return float((np.abs(a - n) / np.maximum(1.0, np.abs(n))).max())
