"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Just enough machinery for transformer-style models: broadcasting
elementwise ops, (batched) matmul, softmax/log-softmax, row gather for
embeddings, concat/slice, and a handful of activations.  Gradients
accumulate into ``Tensor.grad``; the finite-difference checks in the test
suite are the correctness contract.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference speed-up)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad:
                    stack.append((parent, False))
        self.grad = _accum(self.grad, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(grad, contribution):
    if grad is None:
        return contribution.copy()
    grad += contribution
    return grad


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.grad = _accum(b.grad, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.grad = _accum(b.grad, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.grad = _accum(b.grad, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires at least 2-D operands")
    if a.ndim != b.ndim:
        raise ValueError("matmul operands must have equal rank")
    if a.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError("matmul batch dimensions must match")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b.grad = _accum(b.grad, np.swapaxes(a.data, -1, -2) @ g)

    return _make(data, (a, b), backward)


def _elementwise(a, fn, dfn):
    a = as_tensor(a)
    data = fn(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, g * dfn(a.data, data))

    return _make(data, (a,), backward)


def relu(a) -> Tensor:
    return _elementwise(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def tanh(a) -> Tensor:
    return _elementwise(a, np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(a) -> Tensor:
    def fn(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _elementwise(a, fn, lambda x, y: y * (1.0 - y))


def exp(a) -> Tensor:
    return _elementwise(a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    return _elementwise(a, np.log, lambda x, y: 1.0 / x)


def sqrt(a) -> Tensor:
    return _elementwise(a, np.sqrt, lambda x, y: 0.5 / y)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            contrib = np.broadcast_to(g, a.data.shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            contrib = np.broadcast_to(gg, a.data.shape)
        a.grad = _accum(a.grad, contrib.astype(np.float64).copy())

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, g.transpose(inverse))

    return _make(data, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.grad = _accum(t.grad, g[tuple(sl)])

    return _make(data, tuple(tensors), backward)


def slice_rows(a, start, stop) -> Tensor:
    a = as_tensor(a)
    data = a.data[start:stop]

    def backward(g):
        if a.requires_grad:
            contrib = np.zeros_like(a.data)
            contrib[start:stop] = g
            a.grad = _accum(a.grad, contrib)

    return _make(data, (a,), backward)


def take_rows(a, indices) -> Tensor:
    """Row gather (embedding lookup); gradient scatter-adds by index."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    data = a.data[indices]

    def backward(g):
        if a.requires_grad:
            contrib = np.zeros_like(a.data)
            np.add.at(contrib, indices, g)
            a.grad = _accum(a.grad, contrib)

    return _make(data, (a,), backward)


def softmax(a, axis=-1) -> Tensor:
    """Stable softmax; -inf logits come out as exact zeros."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            a.grad = _accum(a.grad, data * (g - inner))

    return _make(data, (a,), backward)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        if a.requires_grad:
            soft = np.exp(data)
            a.grad = _accum(a.grad, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), backward)


def dropout(a, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return as_tensor(a)
    a = as_tensor(a)
    keep = (rng.random(a.data.shape) >= p).astype(np.float64) / (1.0 - p)
    return mul(a, Tensor(keep))


def bce_with_logits(z, targets, weights) -> Tensor:
    """Sum of weighted binary cross-entropies, numerically stable.

    ``targets`` and ``weights`` are plain arrays broadcastable to z.
    """
    z = as_tensor(z)
    y = np.asarray(targets, dtype=np.float64)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), z.data.shape)
    x = z.data
    losses = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    data = np.array((w * losses).sum())

    def backward(g):
        if z.requires_grad:
            sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)),
                           np.exp(np.minimum(x, 0.0)) / (1.0 + np.exp(np.minimum(x, 0.0))))
            z.grad = _accum(z.grad, g * w * (sig - y))

    return _make(data, (z,), backward)


# --- parameters, modules, optimizer ----------------------------------------


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.requires_grad = True  # parameters track grads even under no_grad


class Module:
    """Tiny container: walks attributes to find parameters and submodules."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True):
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = set(own) ^ set(state)
            raise KeyError(f"parameter name mismatch: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()


class Adam:
    def __init__(self, params, lr=5e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))
