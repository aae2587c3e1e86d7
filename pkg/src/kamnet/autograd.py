"""Dense tensors with reverse-mode automatic differentiation.

Evaluation is eager: every operation computes its value immediately and, when
any input requires a gradient, records a node (op name, parents, backward
closure) on the implicit tape.  ``backward`` walks that DAG in reverse
topological order and accumulates gradients into the leaves.

Broadcasting is deliberately narrow.  Binary elementwise ops accept

* identical shapes,
* a size-1 operand against anything (scalar broadcast),
* a 1-D length-C operand against a tensor whose axis 1 has length C
  (per-channel broadcast, used by batch-norm affine terms).

Anything else raises ``ShapeError``; use :func:`broadcast_to` to expand
explicitly.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ShapeError", "tensor", "no_grad", "is_grad_enabled", "backward",
    "finite_diff_grad", "add", "sub", "mul", "div", "neg", "square", "power",
    "exp", "log", "matmul", "sum", "mean", "max", "reshape", "flatten",
    "transpose", "concat", "broadcast_to", "elu", "relu", "sigmoid",
    "softplus", "softmax", "log_softmax", "conv2d", "conv2d_direct",
    "pairwise_sq_dists", "same_padding",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible under the restricted broadcast rules."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, sweeps)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self._parents else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ---------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, cotangent=None):
        return backward(self, cotangent)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


# ---------------------------------------------------------------------------
# backward / oracle


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(root: Tensor, cotangent=None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad``; return ``{leaf: grad}``.

    A non-scalar root needs an explicit cotangent of the root's shape.
    """
    if cotangent is None:
        if root.size != 1:
            raise ShapeError(f"backward() on non-scalar root of shape {root.shape} needs a cotangent")
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(cotangent, dtype=root.dtype)
        if seed.shape != root.shape:
            raise ShapeError(f"cotangent shape {seed.shape} != root shape {root.shape}")
    if not root.requires_grad:
        return {}

    grads: dict[int, np.ndarray] = {id(root): seed}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"{node.op}: gradient shape {pg.shape} != input shape {p.shape}")
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5,
                     indices: Iterable[int] | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    ``indices`` restricts evaluation to a subset of flat coordinates; the
    remaining entries of the result are NaN.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan) if indices is not None else np.zeros(flat.shape)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_mode(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1:
        return "scalar_b"
    if a.size == 1:
        return "scalar_a"
    if b.ndim == 1 and a.ndim >= 2 and a.shape[1] == b.shape[0]:
        return "channel_b"
    if a.ndim == 1 and b.ndim >= 2 and b.shape[1] == a.shape[0]:
        return "channel_a"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _prepare(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    mode = _broadcast_mode(a.data, b.data)
    ad, bd = a.data, b.data
    if mode == "scalar_b":
        bd = bd.reshape(())
    elif mode == "scalar_a":
        ad = ad.reshape(())
    elif mode == "channel_b":
        bd = _channel_view(bd, ad.ndim)
    elif mode == "channel_a":
        ad = _channel_view(ad, bd.ndim)
    return a, b, ad, bd, mode


def _unbroadcast(g: np.ndarray, target: Tensor, role: str, mode: str) -> np.ndarray:
    if mode == "same":
        return g
    if mode == f"scalar_{role}":
        return np.asarray(g.sum(), dtype=g.dtype).reshape(target.shape)
    if mode == f"channel_{role}":
        axes = (0,) + tuple(range(2, g.ndim))
        return g.sum(axis=axes)
    return g


def add(a, b) -> Tensor:
    a, b, ad, bd, mode = _prepare(a, b)

    def bw(g):
        return _unbroadcast(g, a, "a", mode), _unbroadcast(g, b, "b", mode)

    return _node(ad + bd, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b, ad, bd, mode = _prepare(a, b)

    def bw(g):
        return _unbroadcast(g, a, "a", mode), _unbroadcast(-g, b, "b", mode)

    return _node(ad - bd, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b, ad, bd, mode = _prepare(a, b)

    def bw(g):
        return (_unbroadcast(g * bd, a, "a", mode) if a.requires_grad else None,
                _unbroadcast(g * ad, b, "b", mode) if b.requires_grad else None)

    return _node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b, ad, bd, mode = _prepare(a, b)
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, a, "a", mode) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, b, "b", mode) if b.requires_grad else None)

    return _node(out, (a, b), bw, "div")


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _node(-x.data, (x,), lambda g: (-g,), "neg")


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: (2 * x.data * g,), "square")


def power(x, p: float) -> Tensor:
    x = _as_tensor(x)
    return _node(x.data ** p, (x,), lambda g: (p * x.data ** (p - 1) * g,), "power")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def elu(x, alpha: float = 1.0) -> Tensor:
    x = _as_tensor(x)
    neg_part = alpha * np.expm1(np.minimum(x.data, 0))
    pos = x.data > 0
    out = np.where(pos, x.data, neg_part)
    return _node(out, (x,), lambda g: (g * np.where(pos, 1, neg_part + alpha).astype(g.dtype),), "elu")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)
    return _node(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out = np.logaddexp(0, d).astype(d.dtype)

    def bw(g):
        e = np.exp(-np.abs(d))
        s = np.where(d >= 0, 1 / (1 + e), e / (1 + e))
        return (g * s.astype(d.dtype),)

    return _node(out, (x,), bw, "softplus")


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), bw, "softmax")


def log_softmax(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# linear algebra / reductions / shape


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must match exactly, except that a 2-D right operand
    is shared across all batch entries of the left one (dense layers).
    """
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    shared_b = b.ndim == 2 and a.ndim > 2
    if not shared_b and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared_b:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), bw, "matmul")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _node(np.asarray(out), (x,), bw, "mean")


def max(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max-reduction; ties send the whole gradient to the first maximiser."""
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out_k = x.data.max(axis=axes, keepdims=True)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        # move reduced axes to the end to locate the first maximiser
        rest = [i for i in range(x.ndim) if i not in axes]
        perm = rest + list(axes)
        xt = np.transpose(x.data, perm).reshape([x.shape[i] for i in rest] + [-1])
        first = xt.argmax(axis=-1)
        mask = np.zeros_like(xt)
        np.put_along_axis(mask, first[..., None], 1, axis=-1)
        mask = mask.reshape([x.shape[i] for i in perm]).transpose(np.argsort(perm))
        return (mask * g,)

    out = out_k if keepdims else np.squeeze(out_k, axis=axes)
    return _node(np.asarray(out), (x,), bw, "max")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x, start: int = 1) -> Tensor:
    x = _as_tensor(x)
    return reshape(x, x.shape[:start] + (-1,))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def broadcast_to(x, shape) -> Tensor:
    """Explicit numpy-style expansion (the only general broadcast)."""
    x = _as_tensor(x)
    shape = tuple(shape)
    lead = len(shape) - x.ndim

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _node(np.broadcast_to(x.data, shape).copy(), (x,), bw, "broadcast_to")


def pairwise_sq_dists(x) -> Tensor:
    """Squared Euclidean distances between the rows of ``x`` (..., n, m).

    Uses the Gram identity, clamps at zero and pins the diagonal to 0.
    """
    x = _as_tensor(x)
    xd = x.data
    sq = (xd * xd).sum(axis=-1)
    gram = xd @ np.swapaxes(xd, -1, -2)
    d = sq[..., :, None] + sq[..., None, :] - 2 * gram
    live = d > 0
    n = xd.shape[-2]
    eye = np.eye(n, dtype=bool)
    live &= ~eye
    d = np.where(live, d, 0).astype(xd.dtype)

    def bw(g):
        gs = np.where(live, g, 0)
        gs = gs + np.swapaxes(gs, -1, -2)
        return (2 * (gs.sum(axis=-1)[..., None] * xd - gs @ xd),)

    return _node(d, (x,), bw, "pairwise_sq_dists")


# ---------------------------------------------------------------------------
# convolution


def same_padding(kh: int, kw: int) -> tuple[int, int, int, int]:
    """(top, bottom, left, right) zero padding that preserves spatial size."""
    return ((kh - 1) // 2, kh - 1 - (kh - 1) // 2, (kw - 1) // 2, kw - 1 - (kw - 1) // 2)


def _resolve_padding(padding, kh, kw):
    if padding == "same":
        return same_padding(kh, kw)
    if padding == "valid":
        return (0, 0, 0, 0)
    if isinstance(padding, int):
        return (padding,) * 4
    padding = tuple(padding)
    if len(padding) == 2:
        return (padding[0], padding[0], padding[1], padding[1])
    return padding


_FFT_MIN_TAPS = 24


def _fft_len(n: int) -> int:
    """Power of two >= n; odd prime lengths are slow in pocketfft."""
    return 1 << (n - 1).bit_length()


def _row_depthwise(w: np.ndarray, groups: int) -> bool:
    F, Cg, kh, _ = w.shape
    return kh == 1 and Cg == 1 and F == groups


def _corr(xp: np.ndarray, w: np.ndarray, groups: int) -> np.ndarray:
    """Grouped valid cross-correlation of an already padded array.

    Returns the output and the im2col matrix (None on the depthwise-row path).
    """
    N, C, Hp, Wp = xp.shape
    F, Cg, kh, kw = w.shape
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    if _row_depthwise(w, groups):
        wt = w[:, 0, 0, :].astype(xp.dtype, copy=False)
        # one tap at a time beats materialising an (N*Ho*Wo, kw) im2col copy
        out = xp[:, :, :, 0:Wo] * wt[None, :, None, 0:1]
        for j in range(1, kw):
            out += xp[:, :, :, j:j + Wo] * wt[None, :, None, j:j + 1]
        return out, None
    G, Fg, K = groups, F // groups, Cg * kh * kw
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, Ho, Wo, kh, kw
    cols = (win.reshape(N, G, Cg, Ho, Wo, kh, kw)
               .transpose(1, 0, 3, 4, 2, 5, 6)
               .reshape(G, N * Ho * Wo, K))
    wk = w.reshape(G, Fg, K).transpose(0, 2, 1)  # G, K, Fg
    out = cols @ wk
    return out.reshape(G, N, Ho, Wo, Fg).transpose(1, 0, 4, 2, 3).reshape(N, F, Ho, Wo), cols


def conv2d(x, w, padding="valid", groups: int = 1) -> Tensor:
    """Stride-1 2-D cross-correlation, no bias.

    x: (N, Cin, H, W); w: (F, Cin // groups, kh, kw).  ``groups == Cin``
    gives a depthwise convolution with depth multiplier F // Cin.
    """
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    N, C, H, W = x.shape
    F, Cg, kh, kw = w.shape
    if C % groups or F % groups or Cg != C // groups:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}, groups={groups}")
    pt, pb, pl, pr = _resolve_padding(padding, kh, kw)
    Hp, Wp = H + pt + pb, W + pl + pr
    if kh > Hp or kw > Wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    G, Fg = groups, F // groups

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    if _row_depthwise(w.data, groups) and kw > _FFT_MIN_TAPS:
        return _row_conv_fft(x, w, xp, (pt, pl))
    out, cols = _corr(xp, w.data, groups)

    def bw(g):
        gw = None
        if w.requires_grad and cols is None:
            gw = np.empty(w.shape, dtype=g.dtype)
            for j in range(kw):
                gw[:, 0, 0, j] = np.einsum("nchw,nchw->c", g, xp[:, :, :, j:j + Wo])
        elif w.requires_grad:
            g2 = g.reshape(N, G, Fg, Ho, Wo).transpose(1, 0, 3, 4, 2).reshape(G, N * Ho * Wo, Fg)
            gw = (np.swapaxes(cols, 1, 2) @ g2).transpose(0, 2, 1).reshape(F, Cg, kh, kw)
        gx = None
        if x.requires_grad:
            # full correlation with the 180-degree rotated, in/out-swapped kernel
            w_rot = (w.data[:, :, ::-1, ::-1].reshape(G, Fg, Cg, kh, kw)
                     .transpose(0, 2, 1, 3, 4).reshape(G * Cg, Fg, kh, kw))
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gxp, _ = _corr(gp, np.ascontiguousarray(w_rot), groups)
            gx = np.ascontiguousarray(gxp[:, :, pt:pt + H, pl:pl + W])
        return gx, gw

    return _node(np.ascontiguousarray(out), (x, w), bw, "conv2d")


def _row_conv_fft(x: Tensor, w: Tensor, xp: np.ndarray, offsets) -> Tensor:
    """Depthwise 1 x kw convolution through the real FFT (long kernels).

    The transform length is at least the padded width, so the valid part of
    the circular product carries no wrap-around.
    """
    pt, pl = offsets
    N, C, H, W = x.shape
    Wp, kw = xp.shape[-1], w.shape[-1]
    Wo = Wp - kw + 1
    n = _fft_len(Wp)
    dt = x.dtype
    X = np.fft.rfft(xp, n=n, axis=-1)
    Wf = np.fft.rfft(w.data[:, 0, 0, :], n=n, axis=-1)[None, :, None, :]
    # cross-correlation is the product with the conjugate kernel spectrum
    out = np.fft.irfft(X * np.conj(Wf), n=n, axis=-1)[..., :Wo].astype(dt)

    def bw(g):
        G = np.fft.rfft(g, n=n, axis=-1)
        gx = gw = None
        if w.requires_grad:
            cross = (np.conj(G) * X).sum(axis=(0, 2))
            gw = np.fft.irfft(cross, n=n, axis=-1)[:, :kw].astype(dt).reshape(w.shape)
        if x.requires_grad:
            gxp = np.fft.irfft(G * Wf, n=n, axis=-1)[..., :Wp]
            gx = np.ascontiguousarray(gxp[:, :, pt:pt + H, pl:pl + W], dtype=dt)
        return gx, gw

    return _node(np.ascontiguousarray(out), (x, w), bw, "conv2d")


def conv2d_direct(x: np.ndarray, w: np.ndarray, padding="valid", groups: int = 1) -> np.ndarray:
    """Nested-loop reference for :func:`conv2d` (plain arrays, no autodiff)."""
    N, C, H, W = x.shape
    F, Cg, kh, kw = w.shape
    if C % groups or F % groups or Cg != C // groups:
        raise ShapeError("conv2d_direct channel mismatch")
    pt, pb, pl, pr = _resolve_padding(padding, kh, kw)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    Fg = F // groups
    out = np.zeros((N, F, Ho, Wo), dtype=np.result_type(x, w))
    for n in range(N):
        for f in range(F):
            gidx = f // Fg
            for h in range(Ho):
                for v in range(Wo):
                    acc = 0.0
                    for c in range(Cg):
                        cin = gidx * Cg + c
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[n, cin, h + i, v + j] * w[f, c, i, j]
                    out[n, f, h, v] = acc
    return out
