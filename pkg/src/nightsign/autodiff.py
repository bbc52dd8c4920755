"""Minimal reverse-mode automatic differentiation on numpy arrays.

Everything in the toolkit that needs gradients (the enhancement
transforms, the parameter head, the detector wrapper, the fusion
classifier and its losses) runs on :class:`Tensor`. The op set is
deliberately small; each op stores a backward closure and the graph is
walked once, in reverse topological order, by :meth:`Tensor.backward`.

All data is float64 so that central finite differences (step 1e-4) can
resolve analytic gradients to relative errors well below 1e-3.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the context (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep seeding `grad` (defaults to ones)."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data

        def backward(g):
            self.requires_grad and self._accumulate(g)
            other.requires_grad and other._accumulate(g)

        return Tensor._make(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accumulate(-g)

        return Tensor._make(-self.data, (self,), backward)

    def __sub__(self, other):
        other = as_tensor(other)
        out_data = self.data - other.data

        def backward(g):
            self.requires_grad and self._accumulate(g)
            other.requires_grad and other._accumulate(-g)

        return Tensor._make(out_data, (self, other), backward)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data

        def backward(g):
            self.requires_grad and self._accumulate(g * other.data)
            other.requires_grad and other._accumulate(g * self.data)

        return Tensor._make(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_data = self.data / other.data

        def backward(g):
            self.requires_grad and self._accumulate(g / other.data)
            other.requires_grad and other._accumulate(-g * self.data / other.data ** 2)

        return Tensor._make(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        """x ** p with p a python scalar or a (broadcastable) Tensor.

        Gradient w.r.t. a tensor exponent needs x > 0; callers clamp first.
        """
        if isinstance(exponent, Tensor):
            exp_t = exponent
            out_data = self.data ** exp_t.data

            def backward(g):
                if self.requires_grad:
                    self._accumulate(g * exp_t.data * self.data ** (exp_t.data - 1.0))
                if exp_t.requires_grad:
                    exp_t._accumulate(g * out_data * np.log(self.data))

            return Tensor._make(out_data, (self, exp_t), backward)

        p = float(exponent)
        out_data = self.data ** p

        def backward(g):
            self._accumulate(g * p * self.data ** (p - 1.0))

        return Tensor._make(out_data, (self,), backward)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul requires >=2-D operands; reshape first")
        out_data = np.matmul(self.data, other.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(np.matmul(g, np.swapaxes(other.data, -1, -2)))
            if other.requires_grad:
                other._accumulate(np.matmul(np.swapaxes(self.data, -1, -2), g))

        return Tensor._make(out_data, (self, other), backward)

    # -- elementwise ---------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            self._accumulate(g * out_data)

        return Tensor._make(out_data, (self,), backward)

    def log(self):
        def backward(g):
            self._accumulate(g / self.data)

        return Tensor._make(np.log(self.data), (self,), backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g):
            self._accumulate(g * 0.5 / out_data)

        return Tensor._make(out_data, (self,), backward)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g):
            self._accumulate(g * (1.0 - out_data ** 2))

        return Tensor._make(out_data, (self,), backward)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            self._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (self,), backward)

    def relu(self):
        mask = self.data > 0

        def backward(g):
            self._accumulate(g * mask)

        return Tensor._make(self.data * mask, (self,), backward)

    def softplus(self):
        x = self.data
        out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

        def backward(g):
            self._accumulate(g / (1.0 + np.exp(-x)))

        return Tensor._make(out_data, (self,), backward)

    def leaky_relu(self, slope: float = 0.1):
        scale = np.where(self.data > 0, 1.0, slope)

        def backward(g):
            self._accumulate(g * scale)

        return Tensor._make(self.data * scale, (self,), backward)

    def gelu(self):
        x = self.data
        cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
        pdf = np.exp(-0.5 * x ** 2) / np.sqrt(2.0 * np.pi)

        def backward(g):
            self._accumulate(g * (cdf + x * pdf))

        return Tensor._make(x * cdf, (self,), backward)

    def clip(self, lo: float | None, hi: float | None):
        """Clamp with pass-through subgradient on the closed interval."""
        out_data = np.clip(self.data, lo, hi)
        mask = np.ones_like(self.data, dtype=bool)
        if lo is not None:
            mask &= self.data >= lo
        if hi is not None:
            mask &= self.data <= hi

        def backward(g):
            self._accumulate(g * mask)

        return Tensor._make(out_data, (self,), backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))

        return Tensor._make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    # -- shape ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.data.shape

        def backward(g):
            self._accumulate(g.reshape(in_shape))

        return Tensor._make(self.data.reshape(shape), (self,), backward)

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))

        def backward(g):
            self._accumulate(g.transpose(inv))

        return Tensor._make(self.data.transpose(axes), (self,), backward)

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor._make(out_data, (self,), backward)

    def take_along_axis_op(self, idx: np.ndarray, axis: int):
        out_data = np.take_along_axis(self.data, idx, axis=axis)

        def backward(g):
            full = np.zeros_like(self.data)
            np.put_along_axis(full, idx, g, axis=axis)
            self._accumulate(full)

        return Tensor._make(out_data, (self,), backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._make(out_data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return Tensor._make(out_data, tensors, backward)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    # the detached max is a constant shift: same value, same gradient
    shifted = t - np.max(t.data, axis=axis, keepdims=True)
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    shifted = t - np.max(t.data, axis=axis, keepdims=True)
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def dropout(t: Tensor, p: float, rng: np.random.Generator | None,
            training: bool) -> Tensor:
    if not training or p <= 0.0:
        return t
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(t.shape) >= p) / (1.0 - p)
    return t * Tensor(keep)


# -- structured ops ----------------------------------------------------------


def take_axis(t: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis; backward scatters with np.add.at.

    The workhorse behind reflect padding and bilinear resizing, both of
    which are plain linear gathers.
    """
    t = as_tensor(t)
    out_data = np.take(t.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(t.data)
        sl: list = [slice(None)] * t.data.ndim
        sl[axis] = idx
        np.add.at(full, tuple(sl), g)
        t._accumulate(full)

    return Tensor._make(out_data, (t,), backward)


def reflect_pad(t: Tensor, pad: int, axis: int) -> Tensor:
    """Symmetric (edge not repeated) padding along one axis."""
    n = as_tensor(t).shape[axis]
    if pad >= n:
        raise ValueError("reflect pad width must be smaller than the axis length")
    idx = np.pad(np.arange(n), pad, mode="reflect")
    return take_axis(t, idx, axis)


def correlate1d(t: Tensor, kernel: np.ndarray, axis: int) -> Tensor:
    """Valid 1-D correlation with a constant kernel along `axis`."""
    t = as_tensor(t)
    kernel = np.asarray(kernel, dtype=np.float64)
    k = kernel.shape[0]
    n = t.shape[axis]
    out_len = n - k + 1
    if out_len <= 0:
        raise ValueError("kernel longer than axis")

    def sl(start, stop):
        s: list = [slice(None)] * t.data.ndim
        s[axis] = slice(start, stop)
        return tuple(s)

    out_data = np.zeros(t.data[sl(0, out_len)].shape)
    for j in range(k):
        out_data += kernel[j] * t.data[sl(j, j + out_len)]

    def backward(g):
        full = np.zeros_like(t.data)
        for j in range(k):
            full[sl(j, j + out_len)] += kernel[j] * g
        t._accumulate(full)

    return Tensor._make(out_data, (t,), backward)


def _bilinear_weights(n_in: int, n_out: int):
    """Half-pixel-center source indices and weights for 1-D bilinear resize."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    return i0, i1, 1.0 - w1, w1


def resize_bilinear(t: Tensor, out_size: tuple[int, int],
                    axes: tuple[int, int]) -> Tensor:
    """Bilinear resize along two axes (half-pixel centers, no corner align)."""
    t = as_tensor(t)
    for axis, n_out in zip(axes, out_size):
        n_in = t.shape[axis]
        if n_in == n_out:
            continue
        i0, i1, w0, w1 = _bilinear_weights(n_in, n_out)
        wshape = [1] * t.ndim
        wshape[axis] = n_out
        t = (take_axis(t, i0, axis) * Tensor(w0.reshape(wshape))
             + take_axis(t, i1, axis) * Tensor(w1.reshape(wshape)))
    return t


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NHWC layout.

    x: (B, H, W, Cin); w: (kh, kw, Cin, Cout); zero padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    B, H, W, Cin = x.shape
    kh, kw, wcin, Cout = w.shape
    if wcin != Cin:
        raise ValueError(f"channel mismatch: input {Cin}, kernel {wcin}")
    s, p = int(stride), int(padding)
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : s * (Ho - 1) + 1 : s, : s * (Wo - 1) + 1 : s]  # (B,Ho,Wo,Cin,kh,kw)
    out_data = np.einsum("bhwcij,ijcf->bhwf", win, w.data, optimize=True)
    if b is not None:
        out_data = out_data + b.data

    def backward(g):
        if w.requires_grad:
            w._accumulate(np.einsum("bhwcij,bhwf->ijcf", win, g, optimize=True))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gp[:, i : i + s * (Ho - 1) + 1 : s,
                       j : j + s * (Wo - 1) + 1 : s, :] += np.einsum(
                           "bhwf,cf->bhwc", g, w.data[i, j], optimize=True)
            x._accumulate(gp[:, p : p + H, p : p + W, :] if p else gp)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out_data, parents, backward)
