"""Kernel attention and the three baseline attention modules.

All modules act on a feature block ``x`` of shape (N, C, H, W) at the
insertion point and return a block of the same shape.  The kernel attention
module (KAM) treats the C channel maps, flattened over (H, W), as the feature
vectors ``x_i`` and refines them with a Gaussian kernel matrix:

    M_ij = exp(-alpha * ||x_i - x_j||^2),      out = x + M x

with ``alpha = a + softplus(rho)`` so that alpha stays inside (a, inf).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import BatchNorm2d, Module, batchnorm, glorot_uniform

VARIANTS = ("none", "kam", "qkv", "se", "cbam")


@dataclass(frozen=True)
class AttentionChoice:
    variant: str = "none"
    a: float = -0.1              # KAM lower bound on alpha
    heads: int = 1               # KAM heads
    alpha_init: float = 1.0      # KAM alpha at build time
    reduction: int = 8           # SE / CBAM
    spatial_kernel: int = 7      # CBAM
    spatial_bn: bool = True      # CBAM
    qkv_dim: int | None = None   # q/k/v projection width; None -> channels
    qkv_bias: bool = True
    qkv_out_proj: bool = True
    qkv_gate: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.heads < 1:
            raise ValueError("heads must be positive")
        if self.variant == "kam" and not self.alpha_init > self.a:
            raise ValueError(f"alpha_init={self.alpha_init} must exceed the lower bound a={self.a}")

    def to_dict(self) -> dict:
        return asdict(self)


def inverse_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


# ---------------------------------------------------------------------------
# KAM


def kernel_matrix(x, alpha) -> Tensor:
    """Gaussian kernel between the rows of ``x`` (..., n, m) -> (..., n, n).

    ``alpha`` is a scalar or, for a batch (N, n, m), a length-N vector giving
    each sample its own sharpness.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha, dtype=x.dtype))
    d = ag.pairwise_sq_dists(x)
    if alpha.size > 1:
        if alpha.ndim != 1 or d.ndim != 3 or alpha.shape[0] != d.shape[0]:
            raise ag.ShapeError(f"per-sample alpha of shape {alpha.shape} does not match kernel batch {d.shape}")
        alpha = ag.broadcast_to(ag.reshape(alpha, (alpha.shape[0], 1, 1)), d.shape)
    return ag.exp(ag.neg(alpha * d))


def kam_apply(x: Tensor, alpha, heads: int = 1,
              kernel_fn: Callable[[Tensor, Tensor], Tensor] | None = None) -> Tensor:
    """(I + M_K) x over the channel axis of an (N, C, H, W) block."""
    N, C, H, W = x.shape
    m = H * W
    if m % heads:
        raise ValueError(f"feature length {m} not divisible by heads={heads}")
    kernel_fn = kernel_fn or kernel_matrix
    X = ag.reshape(x, (N, C, m))
    if heads == 1:
        Y = X + ag.matmul(kernel_fn(X, alpha), X)
    else:
        seg = m // heads
        parts = []
        for h in range(heads):
            Xh = _slice_last(X, h * seg, (h + 1) * seg)
            parts.append(Xh + ag.matmul(kernel_fn(Xh, alpha), Xh))
        Y = ag.concat(parts, axis=-1)
    return ag.reshape(Y, x.shape)


def _slice_last(x: Tensor, lo: int, hi: int) -> Tensor:
    full = x.shape

    def bw(g):
        out = np.zeros(full, dtype=g.dtype)
        out[..., lo:hi] = g
        return (out,)

    return ag._node(np.ascontiguousarray(x.data[..., lo:hi]), (x,), bw, "slice")


class KernelAttention(Module):
    """One trainable scalar ``rho``; ``alpha = a + softplus(rho)``."""

    def __init__(self, a: float = -0.1, heads: int = 1, alpha_init: float = 1.0, dtype=np.float32):
        super().__init__()
        self.a = float(a)
        self.heads = heads
        self.rho = Tensor(np.asarray(inverse_softplus(alpha_init - a), dtype=dtype), requires_grad=True)
        self.kernel_fn: Callable | None = None

    def alpha(self) -> Tensor:
        return ag.softplus(self.rho) + self.a

    @property
    def alpha_value(self) -> float:
        return float(self.alpha().data)

    def forward(self, x: Tensor, alpha: Tensor | float | None = None) -> Tensor:
        if alpha is None:
            alpha = self.alpha()
        elif not isinstance(alpha, Tensor):
            alpha = Tensor(np.asarray(alpha, dtype=x.dtype))
        return kam_apply(x, alpha, self.heads, self.kernel_fn)


# ---------------------------------------------------------------------------
# baselines


def _p(rng, shape, fan_in, fan_out, dtype):
    return Tensor(glorot_uniform(rng, shape, fan_in, fan_out, dtype), requires_grad=True)


def _z(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _affine(x: Tensor, W: Tensor, b: Tensor | None) -> Tensor:
    y = ag.matmul(x, W)
    return y + ag.broadcast_to(b, y.shape) if b is not None else y


class QKVAttention(Module):
    """Softmax-free self-attention over time steps: [q k^T] v.

    Tokens are the H*W positions, each a C-vector.  The attention branch goes
    through an optional output projection and a scalar gate before the skip.
    """

    def __init__(self, channels: int, dim: int | None = None, bias: bool = True, out_proj: bool = True,
                 gate: bool = True, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        C, p = channels, dim or channels
        if not out_proj and p != C:
            raise ValueError(f"value projection width {p} must equal channels {C} without an output projection")
        self.channels = C
        self.wq = _p(rng, (C, p), C, p, dtype)
        self.wk = _p(rng, (C, p), C, p, dtype)
        self.wv = _p(rng, (C, p), C, p, dtype)
        self.bq = _z(p, dtype) if bias else None
        self.bk = _z(p, dtype) if bias else None
        self.bv = _z(p, dtype) if bias else None
        self.wo = _p(rng, (p, C), p, C, dtype) if out_proj else None
        self.bo = _z(C, dtype) if out_proj and bias else None
        self.gate = _z((), dtype) if gate else None

    @staticmethod
    def count(channels: int, dim: int | None = None, bias: bool = True, out_proj: bool = True,
              gate: bool = True) -> int:
        C, p = channels, dim or channels
        n = 3 * (C * p + (p if bias else 0))
        if out_proj:
            n += p * C + (C if bias else 0)
        return n + (1 if gate else 0)

    def forward(self, x: Tensor) -> Tensor:
        N, C, H, W = x.shape
        if C != self.channels:
            raise ag.ShapeError(f"QKV expects {self.channels} channels, got {C}")
        tok = ag.transpose(ag.reshape(x, (N, C, H * W)), (0, 2, 1))  # N, T, C
        q = _affine(tok, self.wq, self.bq)
        k = _affine(tok, self.wk, self.bk)
        v = _affine(tok, self.wv, self.bv)
        att = ag.matmul(ag.matmul(q, ag.transpose(k, (0, 2, 1))), v)
        if self.wo is not None:
            att = _affine(att, self.wo, self.bo)
        if self.gate is not None:
            att = att * self.gate
        out = ag.reshape(ag.transpose(att, (0, 2, 1)), x.shape)
        return x + out


def _shared_mlp(s: Tensor, w1, b1, w2, b2) -> Tensor:
    return _affine(ag.relu(_affine(s, w1, b1)), w2, b2)


def _channel_gate_apply(x: Tensor, gate: Tensor) -> Tensor:
    N, C, H, W = x.shape
    return x * ag.broadcast_to(ag.reshape(gate, (N, C, 1, 1)), x.shape)


class SqueezeExcitation(Module):
    """Global-average squeeze, C -> C/r -> C excitation, sigmoid channel gate."""

    def __init__(self, channels: int, reduction: int = 8, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        super().__init__()
        _check_reduction(channels, reduction)
        rng = rng if rng is not None else np.random.default_rng(0)
        h = channels // reduction
        self.w1 = _p(rng, (channels, h), channels, h, dtype)
        self.b1 = _z(h, dtype)
        self.w2 = _p(rng, (h, channels), h, channels, dtype)
        self.b2 = _z(channels, dtype)

    @staticmethod
    def count(channels: int, reduction: int = 8) -> int:
        h = channels // reduction
        return channels * h + h + h * channels + channels

    def forward(self, x: Tensor) -> Tensor:
        s = ag.mean(x, (2, 3))
        g = ag.sigmoid(_shared_mlp(s, self.w1, self.b1, self.w2, self.b2))
        return _channel_gate_apply(x, g)


class CBAM(Module):
    """Channel gate (avg+max through a shared MLP) then spatial gate (k x k conv)."""

    def __init__(self, channels: int, reduction: int = 8, spatial_kernel: int = 7, spatial_bn: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        _check_reduction(channels, reduction)
        rng = rng if rng is not None else np.random.default_rng(0)
        h = channels // reduction
        k = spatial_kernel
        self.w1 = _p(rng, (channels, h), channels, h, dtype)
        self.b1 = _z(h, dtype)
        self.w2 = _p(rng, (h, channels), h, channels, dtype)
        self.b2 = _z(channels, dtype)
        self.spatial = _p(rng, (1, 2, k, k), 2 * k * k, k * k, dtype)
        self.spatial_norm = BatchNorm2d(1, dtype=dtype) if spatial_bn else None

    @staticmethod
    def count(channels: int, reduction: int = 8, spatial_kernel: int = 7, spatial_bn: bool = True) -> int:
        h = channels // reduction
        return 2 * channels * h + h + channels + 2 * spatial_kernel ** 2 + (2 if spatial_bn else 0)

    def channel_gate(self, x: Tensor) -> Tensor:
        mlp = (self.w1, self.b1, self.w2, self.b2)
        z = _shared_mlp(ag.mean(x, (2, 3)), *mlp) + _shared_mlp(ag.max(x, (2, 3)), *mlp)
        return ag.sigmoid(z)

    def spatial_gate(self, x: Tensor) -> Tensor:
        pooled = ag.concat([ag.mean(x, 1, keepdims=True), ag.max(x, 1, keepdims=True)], axis=1)
        s = ag.conv2d(pooled, self.spatial, padding="same")
        if self.spatial_norm is not None:
            s = batchnorm(s, self.spatial_norm, self.training)
        return ag.sigmoid(s)

    def forward(self, x: Tensor) -> Tensor:
        x = _channel_gate_apply(x, self.channel_gate(x))
        return x * ag.broadcast_to(self.spatial_gate(x), x.shape)


def _check_reduction(channels: int, r: int) -> None:
    if r >= channels:
        raise ValueError(f"reduction r={r} must be smaller than channels={channels}")
    if channels % r:
        raise ValueError(f"channels={channels} not divisible by reduction r={r}")


# ---------------------------------------------------------------------------
# insertion slot


class AttentionSlot(Module):
    """Uniform wrapper at the insertion point.

    KAM and QKV carry their skip connection internally; SE and CBAM are gated
    refinements, so the slot adds the same external skip around them.
    """

    def __init__(self, choice: AttentionChoice, channels: int, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        super().__init__()
        self.choice = choice
        v = choice.variant
        if v == "kam":
            self.module = KernelAttention(choice.a, choice.heads, choice.alpha_init, dtype=dtype)
        elif v == "qkv":
            self.module = QKVAttention(channels, choice.qkv_dim, choice.qkv_bias, choice.qkv_out_proj,
                                       choice.qkv_gate, rng=rng, dtype=dtype)
        elif v == "se":
            self.module = SqueezeExcitation(channels, choice.reduction, rng=rng, dtype=dtype)
        elif v == "cbam":
            self.module = CBAM(channels, choice.reduction, choice.spatial_kernel, choice.spatial_bn,
                               rng=rng, dtype=dtype)
        else:
            self.module = None

    @staticmethod
    def count(choice: AttentionChoice, channels: int) -> int:
        v = choice.variant
        if v == "kam":
            return 1
        if v == "qkv":
            return QKVAttention.count(channels, choice.qkv_dim, choice.qkv_bias, choice.qkv_out_proj,
                                      choice.qkv_gate)
        if v == "se":
            return SqueezeExcitation.count(channels, choice.reduction)
        if v == "cbam":
            return CBAM.count(channels, choice.reduction, choice.spatial_kernel, choice.spatial_bn)
        return 0

    def forward(self, x: Tensor, alpha=None) -> Tensor:
        v = self.choice.variant
        if v == "none":
            return x
        if v == "kam":
            return self.module(x, alpha)
        if v == "qkv":
            return self.module(x)
        return x + self.module(x)
