"""Parameter containers, layers and the AdamW optimiser."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: any Tensor, Module, or list of Modules attribute is tracked.

    Tensor attributes named in ``buffers`` hold running statistics: they are
    saved in checkpoints but never optimised. Every other Tensor with
    ``requires_grad=True`` is a trainable parameter.
    """

    buffers: tuple = ()

    def _walk(self, prefix: str = "") -> Iterator[tuple[str, Tensor, bool]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value, name in self.buffers
            elif isinstance(value, Module):
                yield from value._walk(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{full}.{i}.")

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t, _ in self._walk(prefix):
            yield name, t

    def named_buffers(self) -> Iterator[tuple[str, Tensor]]:
        for name, t, is_buffer in self._walk():
            if is_buffer:
                yield name, t

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        seen = set()
        for name, t in self.named_tensors():
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        seen = set()
        for name, t in self.named_tensors():
            if id(t) in seen:
                continue
            seen.add(id(t))
            out[name] = t.data
        return out

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_tensors())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, arr in state.items():
            if name not in own:
                continue
            t = own[name]
            arr = np.asarray(arr)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        """Cast every tensor in place (float64 for gradient checks)."""
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr), requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        self.weight = _param(xavier(rng, d_in, d_out, (d_in, d_out), dtype))
        self.bias = _param(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = _param(np.ones(d, dtype=dtype))
        self.beta = _param(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, dtype=np.float32):
        self.layers = [Linear(a, b, rng, dtype=dtype) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if d % heads:
            raise ValueError(f"embedding dim {d} not divisible by {heads} heads")
        self.heads = heads
        for n in ("q", "k", "v", "o"):
            setattr(self, f"w{n}", _param(xavier(rng, d, d, (d, d), dtype)))
            setattr(self, f"b{n}", _param(np.zeros(d, dtype=dtype)))

    def params(self) -> dict:
        return {k: getattr(self, k) for k in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask=None):
        return T.multi_head_attention(q, k, v, self.heads, self.params(), mask)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, dtype=np.float32):
        fan_in = c_in * k * k
        self.weight = _param(rng.normal(0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)).astype(dtype))
        self.bias = _param(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                                 for p in self.params if p.grad is not None)))

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / (norm + 1e-12)
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data *= 1 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


def step_decay(base_lr: float, epoch: int, every: int, factor: float = 0.1) -> float:
    """Learning rate after multiplying by ``factor`` every ``every`` epochs."""
    if every <= 0:
        return base_lr
    return base_lr * factor ** (epoch // every)
