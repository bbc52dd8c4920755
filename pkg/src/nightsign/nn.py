"""Small neural-network layer zoo on top of :mod:`nightsign.autodiff`."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .autodiff import Tensor, as_tensor, conv2d, dropout, softmax


class Module:
    """Base class: parameter discovery by attribute walk, train/eval mode."""

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        seen: set[int] = set()
        for value in self.__dict__.values():
            for p in _collect(value):
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        return params

    def modules(self) -> list["Module"]:
        mods: list[Module] = [self]
        for value in self.__dict__.values():
            if isinstance(value, Module):
                mods.extend(value.modules())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        mods.extend(item.modules())
        return mods

    def train(self) -> None:
        for m in self.modules():
            m._training = True

    def eval(self) -> None:
        for m in self.modules():
            m._training = False

    @property
    def training(self) -> bool:
        return getattr(self, "_training", False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) ^ set(state)
        if missing:
            raise KeyError(f"state dict mismatch on keys: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, value in self.__dict__.items():
            out.extend(_named(value, f"{prefix}{name}"))
        return out


def _collect(value) -> Iterable[Tensor]:
    if isinstance(value, Tensor) and value.requires_grad:
        yield value
    elif isinstance(value, Module):
        yield from value.parameters()
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _collect(item)


def _named(value, key: str) -> list[tuple[str, Tensor]]:
    if isinstance(value, Tensor) and value.requires_grad:
        return [(key, value)]
    if isinstance(value, Module):
        return value.named_parameters(prefix=key + ".")
    if isinstance(value, (list, tuple)):
        out: list[tuple[str, Tensor]] = []
        for i, item in enumerate(value):
            out.extend(_named(item, f"{key}.{i}"))
        return out
    return []


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, -1)
        out = x @ self.weight + self.bias
        return out.reshape(-1) if squeeze else out


class Conv2d(Module):
    """NHWC convolution with zero padding."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int,
                 padding: int, rng: np.random.Generator):
        fan_in = kernel * kernel * c_in
        std = math.sqrt(2.0 / fan_in)
        self.weight = parameter(rng.normal(0.0, std, size=(kernel, kernel, c_in, c_out)))
        self.bias = parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(as_tensor(x), self.weight, self.bias,
                      stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / (var + self.eps).sqrt() * self.gain + self.shift


class FeedForward(Module):
    """position-wise FFN: Linear -> GELU -> Dropout -> Linear."""

    def __init__(self, dim: int, hidden: int, drop: float, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.drop = drop
        self._rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        h = self.fc1(x).gelu()
        h = dropout(h, self.drop, self._rng, self.training)
        return self.fc2(h)


class MultiheadCrossAttention(Module):
    """Single-query multi-head attention: Q from one modality, K/V another.

    Query: (B, D) or (D,). Keys/values: (P, D) shared across the batch or
    (B, P, D) per item. Returns the attended (B, D) vector; the softmax
    weights of the latest call are kept on `last_weights` for inspection.
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by heads {n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def __call__(self, query: Tensor, keys_values: Tensor) -> Tensor:
        query = as_tensor(query)
        kv = as_tensor(keys_values)
        squeeze = query.ndim == 1
        if squeeze:
            query = query.reshape(1, -1)
        B = query.shape[0]
        h, dh = self.n_heads, self.head_dim

        q = self.wq(query).reshape(B, h, 1, dh)
        if kv.ndim == 2:
            P = kv.shape[0]
            k = self.wk(kv).reshape(P, h, dh).transpose((1, 0, 2))   # (h,P,dh)
            v = self.wv(kv).reshape(P, h, dh).transpose((1, 0, 2))
            kT = k.transpose((0, 2, 1))                              # (h,dh,P)
        else:
            P = kv.shape[1]
            flat = kv.reshape(B * P, self.dim)
            k = self.wk(flat).reshape(B, P, h, dh).transpose((0, 2, 1, 3))
            v = self.wv(flat).reshape(B, P, h, dh).transpose((0, 2, 1, 3))
            kT = k.transpose((0, 1, 3, 2))                           # (B,h,dh,P)

        scores = (q @ kT) * (1.0 / math.sqrt(dh))                    # (B,h,1,P)
        attn = softmax(scores, axis=-1)
        self.last_weights = attn.data.copy()
        pooled = (attn @ v).reshape(B, self.dim)
        out = self.wo(pooled)
        return out.reshape(-1) if squeeze else out


class MLP(Module):
    """Stack of Linear layers with ReLU between (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, params: list[Tensor], lr: float = 1e-2, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.buf[i] = self.momentum * self.buf[i] + p.grad
            p.data = p.data - self.lr * self.buf[i]
