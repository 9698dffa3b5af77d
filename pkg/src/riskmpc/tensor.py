"""Minimal reverse-mode autodiff over dense float64 arrays.

A Tensor wraps a numpy array and records its parents plus a closure that
propagates the upstream gradient to them.  backward() runs a topological
sort from the (scalar) loss and accumulates gradients into every tensor
with requires_grad set.  All math is float64 so gradient checks against
central finite differences are meaningful at 1e-4 relative error.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph construction helpers ------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @staticmethod
    def lift(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def detach(self):
        return Tensor(self.data.copy())

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = Tensor.lift(other)
        data = self.data + other.data

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return Tensor._make(data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-Tensor.lift(other))

    def __rsub__(self, other):
        return Tensor.lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor.lift(other)
        data = self.data * other.data
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g * b.data, a.shape),
                    _unbroadcast(g * a.data, b.shape))

        return Tensor._make(data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor.lift(other)
        a, b = self, other
        data = a.data / b.data

        def backward(g):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data ** 2), b.shape))

        return Tensor._make(data, (a, b), backward)

    def matmul(self, other):
        other = Tensor.lift(other)
        a, b = self, other
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ShapeError(
                f"matmul expects >=2-D operands, got {a.data.shape} @ {b.data.shape}")
        if a.data.shape[-1] != b.data.shape[-2]:
            raise ShapeError(
                f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
        data = a.data @ b.data

        def backward(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._make(data, (a, b), backward)

    __matmul__ = matmul

    # -- elementwise nonlinearities ------------------------------------

    def tanh(self):
        data = np.tanh(self.data)

        def backward(g):
            return (g * (1.0 - data ** 2),)

        return Tensor._make(data, (self,), backward)

    def relu(self):
        data = np.maximum(self.data, 0.0)

        def backward(g):
            return (g * (self.data > 0.0),)

        return Tensor._make(data, (self,), backward)

    def sigmoid(self):
        data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            return (g * data * (1.0 - data),)

        return Tensor._make(data, (self,), backward)

    def softplus(self):
        data = np.logaddexp(0.0, self.data)

        def backward(g):
            return (g / (1.0 + np.exp(-self.data)),)

        return Tensor._make(data, (self,), backward)

    def exp(self):
        data = np.exp(self.data)

        def backward(g):
            return (g * data,)

        return Tensor._make(data, (self,), backward)

    def log(self):
        def backward(g):
            return (g / self.data,)

        return Tensor._make(np.log(self.data), (self,), backward)

    def sin(self):
        def backward(g):
            return (g * np.cos(self.data),)

        return Tensor._make(np.sin(self.data), (self,), backward)

    def cos(self):
        def backward(g):
            return (g * -np.sin(self.data),)

        return Tensor._make(np.cos(self.data), (self,), backward)

    def sqrt(self):
        data = np.sqrt(self.data)

        def backward(g):
            return (g * 0.5 / data,)

        return Tensor._make(data, (self,), backward)

    def clip(self, lo, hi):
        """Clamp values; gradient passes through only inside [lo, hi]."""
        data = np.clip(self.data, lo, hi)
        mask = (self.data >= lo) & (self.data <= hi)

        def backward(g):
            return (g * mask,)

        return Tensor._make(data, (self,), backward)

    def softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            return ((g - dot) * data,)

        return Tensor._make(data, (self,), backward)

    def log_softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        data = shifted - lse
        soft = np.exp(data)

        def backward(g):
            return (g - soft * g.sum(axis=axis, keepdims=True),)

        return Tensor._make(data, (self,), backward)

    # -- shape ops -----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        data = self.data.reshape(shape)

        def backward(g):
            return (g.reshape(old),)

        return Tensor._make(data, (self,), backward)

    def broadcast_to(self, shape):
        old = self.shape
        data = np.broadcast_to(self.data, shape).copy()

        def backward(g):
            return (_unbroadcast(g, old),)

        return Tensor._make(data, (self,), backward)

    def __getitem__(self, idx):
        data = self.data[idx]

        def backward(g):
            full = np.zeros_like(self.data)
            full[idx] = g
            return (full,)

        return Tensor._make(data, (self,), backward)

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        return Tensor._make(data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        data = self.data.transpose(axes)

        def backward(g):
            return (g.transpose(inv),)

        return Tensor._make(data, (self,), backward)

    def swapaxes(self, a, b):
        axes = list(range(self.data.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    # -- backward pass -------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def concat(tensors, axis=0):
    tensors = [Tensor.lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(data, tensors, backward)


def stack(tensors, axis=0):
    tensors = [Tensor.lift(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(data, tensors, backward)


def square_diff(a, b):
    """(a - b)**2, elementwise."""
    d = Tensor.lift(a) - Tensor.lift(b)
    return d * d


class Parameter(Tensor):
    """Trainable tensor with Adam moment bookkeeping."""

    __slots__ = ("moment1", "moment2", "step_count")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.moment1 = np.zeros_like(self.data)
        self.moment2 = np.zeros_like(self.data)
        self.step_count = 0


class DivergenceError(RuntimeError):
    pass


class Adam:
    """Standard Adam with bias correction; clears gradients after each step."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, lr):
        for p in self.params:
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient encountered; aborting step")
            p.step_count += 1
            p.moment1 = self.beta1 * p.moment1 + (1 - self.beta1) * g
            p.moment2 = self.beta2 * p.moment2 + (1 - self.beta2) * g * g
            m_hat = p.moment1 / (1 - self.beta1 ** p.step_count)
            v_hat = p.moment2 / (1 - self.beta2 ** p.step_count)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def lr_schedule(fraction, lr_start=1e-3, lr_end=1e-4):
    """Linear decay over training progress fraction in [0, 1]."""
    fraction = min(max(fraction, 0.0), 1.0)
    return lr_start + (lr_end - lr_start) * fraction


def save_checkpoint(path, named_arrays):
    """Write named float64 arrays; round-trips bit-exactly via numpy's npz."""
    arrays = {name: np.asarray(a.data if isinstance(a, Tensor) else a,
                               dtype=np.float64)
              for name, a in named_arrays.items()}
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        return {name: z[name] for name in z.files}
