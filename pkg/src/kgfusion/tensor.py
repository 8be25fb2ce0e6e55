"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations needed by the encoder, the adapters and the fusion
layer are provided. Every operation records its inputs and a closure that
maps the output gradient to input gradients; :meth:`Tensor.backward`
walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientCheckError",
    "tensor",
    "add",
    "mul",
    "matmul",
    "relu",
    "gelu",
    "tanh",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding",
    "dropout",
    "stack",
    "cross_entropy_loss",
    "bce_with_logits",
    "grad_check",
]


class GradientCheckError(AssertionError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autodiff -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad.

        Intermediate gradients live only for the duration of this call, so
        calling ``backward`` twice adds the leaf gradients twice.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tensor_sum(self, axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._make(ad * bd, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return Tensor._make(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._make(y, (x,), lambda g: (g * (1.0 - y * y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor._make(y, (x,), backward)


# -- shape ---------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._make(x.data[index], (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("stack of zero tensors")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# -- normalisation and probabilities ------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return Tensor._make(y, (x, gamma, beta), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    shape = weight.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return Tensor._make(weight.data[ids], (weight,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,))


# -- losses --------------------------------------------------------------------

def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("cross_entropy_loss expects [batch, classes] logits and [batch] labels")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return Tensor._make(np.asarray(loss), (logits,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError("targets must match logits shape")
    z = logits.data
    loss = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))

    def backward(g):
        return ((sig - t) * (g / z.size),)

    return Tensor._make(np.asarray(loss), (logits,), backward)


# -- finite-difference oracle ----------------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    tolerance: float | None = None,
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    Returns ``max |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`` over the checked
    coordinates. ``max_coords`` caps the coordinates probed per parameter
    (chosen with a seeded generator); ``None`` checks all of them. Raises
    :class:`GradientCheckError` when ``tolerance`` is given and exceeded.
    """
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    try:
        out = f()
        if out.data.size != 1 or not np.isfinite(out.data).all():
            raise GradientCheckError("f must return a finite scalar")
        out.backward()
        rng = np.random.default_rng(seed)
        worst = 0.0
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise GradientCheckError("non-finite value during finite differences")
                numeric = (fp - fm) / (2 * step)
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag
            p.grad = None
    if tolerance is not None and worst > tolerance:
        raise GradientCheckError(f"max relative error {worst:.3e} exceeds {tolerance:.1e}")
    return worst
