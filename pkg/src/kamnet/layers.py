"""Network layers on top of :mod:`kamnet.autograd`.

Layers own their parameters as leaf tensors and expose them through
``named_parameters()``; batch-norm running statistics live in
``named_buffers()`` and are never counted as trainable.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
DROPOUT_RATE = 0.25


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Minimal container: parameters, buffers, children, train/eval flag."""

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def _own_params(self) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value

    def _own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield name, getattr(self, name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._own_params():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._own_buffers():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(value: np.ndarray) -> Tensor:
    return Tensor(value, requires_grad=True)


class Conv2d(Module):
    """Bias-free stride-1 convolution; ``groups == in_ch`` makes it depthwise."""

    def __init__(self, in_ch: int, out_ch: int, kernel: tuple[int, int], padding="valid",
                 groups: int = 1, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        if in_ch % groups or out_ch % groups:
            raise ValueError(f"channels ({in_ch}, {out_ch}) not divisible by groups={groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = kernel
        shape = (out_ch, in_ch // groups, kh, kw)
        receptive = kh * kw
        self.weight = _param(glorot_uniform(rng, shape, (in_ch // groups) * receptive,
                                            (out_ch // groups) * receptive, dtype))
        self.padding = padding
        self.groups = groups
        self.in_ch = in_ch

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise ag.ShapeError(f"expected {self.in_ch} input channels, got {x.shape[1]}")
        return ag.conv2d(x, self.weight, padding=self.padding, groups=self.groups)


def depthwise_conv(x: Tensor, kernel: Tensor, padding="valid") -> Tensor:
    """Per-channel convolution: kernel (C, D, kh, kw) -> output (N, C*D, H', W')."""
    C, D, kh, kw = kernel.shape
    if x.shape[1] != C:
        raise ag.ShapeError(f"depthwise kernel expects {C} channels, got {x.shape[1]}")
    return ag.conv2d(x, ag.reshape(kernel, (C * D, 1, kh, kw)), padding=padding, groups=C)


class SeparableConv2d(Module):
    """Depthwise temporal kernel followed by a 1x1 pointwise mix."""

    def __init__(self, channels: int, out_ch: int, kernel: tuple[int, int], depth: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.depthwise = Conv2d(channels, channels * depth, kernel, padding="same", groups=channels,
                                rng=rng, dtype=dtype)
        self.pointwise = Conv2d(channels * depth, out_ch, (1, 1), rng=rng, dtype=dtype)

    @staticmethod
    def count(channels: int, depth: int, kh: int, kw: int, out_ch: int) -> int:
        return channels * depth * kh * kw + channels * depth * out_ch

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class BatchNorm2d(Module):
    """Per-channel batch normalisation over (N, H, W)."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM, dtype=np.float32):
        super().__init__()
        self.gamma = _param(np.ones(channels, dtype=dtype))
        self.beta = _param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def update_running(self, mean: np.ndarray, var: np.ndarray, count: int) -> None:
        unbiased = var * count / max(count - 1, 1)
        m = self.momentum
        self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(self.running_mean.dtype)
        self.running_var = (m * self.running_var + (1 - m) * unbiased).astype(self.running_var.dtype)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(x, self, self.training)


def batchnorm(x: Tensor, bn: BatchNorm2d, training: bool) -> Tensor:
    if not training:
        scale = bn.gamma * ag.Tensor(1.0 / np.sqrt(bn.running_var + bn.eps))
        shift = bn.beta - ag.Tensor(bn.running_mean) * scale
        return x * scale + shift
    if x.shape[0] < 2:
        raise ValueError("batch-norm in train mode needs a batch of at least 2")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    mu = ag.mean(x, axes)
    xc = x - mu
    var = ag.mean(ag.square(xc), axes)
    inv = ag.power(var + bn.eps, -0.5)
    bn.update_running(mu.data, var.data, count)
    return xc * (inv * bn.gamma) + bn.beta


def avg_pool(x: Tensor, window: tuple[int, int]) -> Tensor:
    """Non-overlapping average pooling; trailing remainder is dropped."""
    ph, pw = window
    N, C, H, W = x.shape
    if ph > H or pw > W:
        raise ValueError(f"pool window {window} larger than input {(H, W)}")
    if ph == 1 and pw == 1:
        return x
    Ho, Wo = H // ph, W // pw
    if Ho * ph != H or Wo * pw != W:
        x = _crop(x, Ho * ph, Wo * pw)
    y = ag.reshape(x, (N, C, Ho, ph, Wo, pw))
    return ag.mean(y, (3, 5))


def _crop(x: Tensor, H: int, W: int) -> Tensor:
    full = x.shape

    def bw(g):
        out = np.zeros(full, dtype=g.dtype)
        out[:, :, :H, :W] = g
        return (out,)

    return ag._node(np.ascontiguousarray(x.data[:, :, :H, :W]), (x,), bw, "crop")


def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    y = ag.matmul(x, W)
    if b is not None:
        y = y + ag.broadcast_to(b, y.shape)
    return y


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _param(glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype))
        self.bias = _param(np.zeros(n_out, dtype=dtype)) if bias else None

    @staticmethod
    def count(n_in: int, n_out: int, bias: bool = True) -> int:
        return n_in * n_out + (n_out if bias else 0)

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1 / keep-probability."""
    if not training or rate == 0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / np.asarray(keep, dtype=x.dtype)
    return x * ag.Tensor(mask)
