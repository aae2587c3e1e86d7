"""EEGNet-style backbone with a pluggable attention slot.

Layer stack (insertion slot after the block-2 ELU by default)::

    temporal conv -> BN -> depthwise spatial conv -> BN -> ELU -> avg pool -> dropout
    -> separable conv -> BN -> ELU -> [attention slot] -> avg pool -> dropout
    -> flatten -> dense -> softmax

The first two linear layers commute with each other, and batch-norm between
them is a per-channel affine map, so block 1 is evaluated by mixing the 62
electrodes first and filtering the 8 resulting traces afterwards.  Batch
statistics of the (never materialised) temporal-conv output come from the
lag products of the zero-padded input (:func:`block1_stats`).  The unfused
stack is kept (``fused_block1=False``) and is the reference for the fused one.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .attention import AttentionChoice, AttentionSlot, KernelAttention
from .autograd import Tensor
from .layers import (
    BatchNorm2d, Conv2d, Dense, Module, SeparableConv2d, avg_pool, batchnorm, dropout,
)

SEED_ELECTRODES = (
    "FP1", "FPZ", "FP2", "AF3", "AF4", "F7", "F5", "F3", "F1", "FZ", "F2", "F4", "F6", "F8",
    "FT7", "FC5", "FC3", "FC1", "FCZ", "FC2", "FC4", "FC6", "FT8", "T7", "C5", "C3", "C1", "CZ",
    "C2", "C4", "C6", "T8", "TP7", "CP5", "CP3", "CP1", "CPZ", "CP2", "CP4", "CP6", "TP8", "P7",
    "P5", "P3", "P1", "PZ", "P2", "P4", "P6", "P8", "PO7", "PO5", "PO3", "POZ", "PO4", "PO6",
    "PO8", "CB1", "O1", "OZ", "O2", "CB2",
)

INSERTION_POINTS = ("after_block1", "after_block2")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 62
    n_samples: int = 200
    n_classes: int = 3
    F1: int = 8
    D: int = 1
    F2: int = 16
    temporal_kernel_len: int = 79
    separable_kernel_len: int = 16
    pool1: tuple[int, int] = (1, 2)
    pool2: tuple[int, int] = (1, 2)
    dropout_rate: float = 0.25
    attention: AttentionChoice = field(default_factory=AttentionChoice)
    insertion_point: str = "after_block2"
    fused_block1: bool = True
    electrodes: tuple[str, ...] = SEED_ELECTRODES

    def __post_init__(self):
        object.__setattr__(self, "pool1", tuple(self.pool1))
        object.__setattr__(self, "pool2", tuple(self.pool2))
        object.__setattr__(self, "electrodes", tuple(self.electrodes))
        if isinstance(self.attention, dict):
            object.__setattr__(self, "attention", AttentionChoice(**self.attention))

    # derived sizes ---------------------------------------------------------
    @property
    def block1_channels(self) -> int:
        return self.F1 * self.D

    @property
    def time_after_pool1(self) -> int:
        return self.n_samples // self.pool1[1]

    @property
    def time_after_pool2(self) -> int:
        return self.time_after_pool1 // self.pool2[1]

    @property
    def slot_channels(self) -> int:
        return self.F2 if self.insertion_point == "after_block2" else self.block1_channels

    @property
    def dense_inputs(self) -> int:
        return self.F2 * self.time_after_pool2

    def validate(self) -> None:
        problems = []
        for name in ("n_channels", "n_samples", "n_classes", "F1", "D", "F2",
                     "temporal_kernel_len", "separable_kernel_len"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be positive")
        for name in ("pool1", "pool2"):
            p = getattr(self, name)
            if len(p) != 2 or p[0] != 1 or p[1] < 1:
                problems.append(f"{name} must be (1, p) with p >= 1")
        if not 0 <= self.dropout_rate < 1:
            problems.append("dropout_rate must lie in [0, 1)")
        if self.insertion_point not in INSERTION_POINTS:
            problems.append(f"insertion_point must be one of {INSERTION_POINTS}")
        if len(self.electrodes) != self.n_channels:
            problems.append(f"electrode list has {len(self.electrodes)} names for {self.n_channels} channels")
        if not problems and self.time_after_pool2 < 1:
            problems.append("pooling leaves no time samples for the dense layer")
        if not problems and self.pool1[1] > self.n_samples:
            problems.append("pool1 window larger than the epoch")
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))

    def with_attention(self, variant: str, **kwargs) -> "ModelConfig":
        return replace(self, attention=replace(self.attention, variant=variant, **kwargs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool1"] = list(self.pool1)
        d["pool2"] = list(self.pool2)
        d["electrodes"] = list(self.electrodes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["attention"] = AttentionChoice(**d.get("attention", {}))
        return cls(**d)


def backbone_param_count(cfg: ModelConfig) -> int:
    """Trainable parameters of the backbone without attention (closed form)."""
    F1, D, F2 = cfg.F1, cfg.D, cfg.F2
    n = F1 * cfg.temporal_kernel_len          # temporal conv
    n += 2 * F1                               # BN1
    n += F1 * D * cfg.n_channels              # depthwise spatial
    n += 2 * F1 * D                           # BN2
    n += SeparableConv2d.count(F1 * D, 1, 1, cfg.separable_kernel_len, F2)
    n += 2 * F2                               # BN3
    n += Dense.count(cfg.dense_inputs, cfg.n_classes)
    return n


def param_count(cfg: ModelConfig) -> int:
    return backbone_param_count(cfg) + AttentionSlot.count(cfg.attention, cfg.slot_channels)


# ---------------------------------------------------------------------------
# block-1 statistics


def block1_stats(x: np.ndarray, kernel_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample window sums and lag-product matrices of the padded input.

    For x of shape (N, E, T) (or (N, 1, E, T)) returns ``m`` (N, k) and
    ``R`` (N, k, k), float64, with

        m[n, j]    = sum_{e,t} xpad[n, e, t + j]
        R[n, j, l] = sum_{e,t} xpad[n, e, t + j] * xpad[n, e, t + l]

    where t runs over the T output positions of a 'same' convolution with a
    length-k kernel.  The temporal-conv output u = x (*) w then has
    sum(u) = w . m and sum(u^2) = w^T R w.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        x = x[:, 0]
    N, E, T = x.shape
    k = kernel_len
    _, _, pl, pr = ag.same_padding(1, k)
    xp = np.pad(x, ((0, 0), (0, 0), (pl, pr)))
    L = T + k - 1
    col = xp.sum(axis=1)
    P = np.concatenate([np.zeros((N, 1)), np.cumsum(col, axis=1)], axis=1)
    j = np.arange(k)
    m = P[:, j + T] - P[:, j]
    R = np.empty((N, k, k))
    for d in range(k):
        c = np.einsum("nel,nel->nl", xp[:, :, :L - d], xp[:, :, d:])
        Q = np.concatenate([np.zeros((N, 1)), np.cumsum(c, axis=1)], axis=1)
        jj = np.arange(k - d)
        vals = Q[:, jj + T] - Q[:, jj]
        R[:, jj, jj + d] = vals
        R[:, jj + d, jj] = vals
    return m, R


# ---------------------------------------------------------------------------
# model


class EEGNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = config
        F1D = c.block1_channels
        self.temporal = Conv2d(1, c.F1, (1, c.temporal_kernel_len), padding="same", rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(c.F1, dtype=dtype)
        self.spatial = Conv2d(c.F1, F1D, (c.n_channels, 1), groups=c.F1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(F1D, dtype=dtype)
        self.separable = SeparableConv2d(F1D, c.F2, (1, c.separable_kernel_len), rng=rng, dtype=dtype)
        self.bn3 = BatchNorm2d(c.F2, dtype=dtype)
        self.slot = AttentionSlot(c.attention, c.slot_channels, rng=rng, dtype=dtype)
        self.classifier = Dense(c.dense_inputs, c.n_classes, rng=rng, dtype=dtype)
        self.dropout_rng = np.random.default_rng(seed)

    # -- helpers -------------------------------------------------------------
    @property
    def kam(self) -> KernelAttention | None:
        m = self.slot.module
        return m if isinstance(m, KernelAttention) else None

    def learned_alpha(self) -> float | None:
        return self.kam.alpha_value if self.kam is not None else None

    def first_depthwise_kernels(self) -> np.ndarray:
        """Spatial kernels of the first depthwise layer, (F1*D, n_channels)."""
        return self.spatial.weight.data[:, 0, :, 0].copy()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.state_arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "EEGNet":
        """Copy of the model with every parameter and buffer cast to ``dtype``."""
        other = EEGNet(self.config, self.seed, dtype=dtype)
        other.load_state(self.state_arrays())
        other.training = self.training
        other.train(self.training)
        return other

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) ^ set(arrays)
        if missing:
            raise KeyError(f"state mismatch on {sorted(missing)}")
        for name, p in params.items():
            if tuple(arrays[name].shape) != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
            p.data = np.array(arrays[name], dtype=self.dtype)
        for name in buffers:
            owner, attr = self._resolve(name)
            setattr(owner, attr, np.array(arrays[name], dtype=self.dtype))

    def _resolve(self, dotted: str):
        parts = dotted.split(".")
        owner = self
        for p in parts[:-1]:
            owner = getattr(owner, p)
        return owner, parts[-1]

    # -- forward -------------------------------------------------------------
    def _block1_unfused(self, x: Tensor) -> Tensor:
        h = self.temporal(x)
        h = batchnorm(h, self.bn1, self.training)
        return self.spatial(h)

    def _block1_fused(self, x: Tensor, stats) -> Tensor:
        c = self.config
        F1, k = c.F1, c.temporal_kernel_len
        s = self.spatial.weight                                  # F1, 1, E, 1
        w = self.temporal.weight                                 # F1, 1, 1, k
        z = ag.conv2d(x, ag.reshape(s, (F1, 1, c.n_channels, 1)))            # N, F1, 1, T
        v = ag.conv2d(z, w, padding="same", groups=F1)                       # N, F1, 1, T
        S = ag.sum(ag.reshape(s, (F1, c.n_channels)), axis=1)                # F1
        bn = self.bn1
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("batch-norm in train mode needs a batch of at least 2")
            if stats is None:
                m, R = block1_stats(x.data, k)
                m, R = m.sum(0), R.sum(0)
            else:
                m, R = stats
            count = x.shape[0] * c.n_channels * c.n_samples
            w2 = ag.reshape(w, (F1, k))
            mu = ag.reshape(ag.matmul(w2, Tensor(m.reshape(k, 1).astype(self.dtype))), (F1,)) / count
            e2 = ag.sum(ag.matmul(w2, Tensor(R.astype(self.dtype))) * w2, axis=1) / count
            var = e2 - ag.square(mu)
            bn.update_running(mu.data, var.data, count)
            inv = ag.power(var + bn.eps, -0.5)
        else:
            mu = Tensor(bn.running_mean)
            inv = Tensor(1.0 / np.sqrt(bn.running_var + bn.eps))
        return (v - mu * S) * (inv * bn.gamma) + bn.beta * S

    def logits(self, x, alpha=None, stats=None) -> Tensor:
        """Pre-softmax outputs of the dense layer, (N, n_classes)."""
        c = self.config
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 3:
            x = ag.reshape(x, (x.shape[0], 1) + x.shape[1:])
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != c.n_channels or x.shape[3] != c.n_samples:
            raise ag.ShapeError(f"expected input (N, 1, {c.n_channels}, {c.n_samples}), got {x.shape}")
        train = self.training
        # the fused statistics treat the input as data, so an input that needs
        # its own gradient under batch statistics takes the plain stack
        if c.fused_block1 and c.D == 1 and not (train and x.requires_grad):
            h = self._block1_fused(x, stats)
        else:
            h = self._block1_unfused(x)
        h = ag.elu(batchnorm(h, self.bn2, train))
        if c.insertion_point == "after_block1":
            h = self.slot(h, alpha)
        h = avg_pool(h, c.pool1)
        h = dropout(h, c.dropout_rate, self.dropout_rng, train)
        h = ag.elu(batchnorm(self.separable(h), self.bn3, train))
        if c.insertion_point == "after_block2":
            h = self.slot(h, alpha)
        h = avg_pool(h, c.pool2)
        h = dropout(h, c.dropout_rate, self.dropout_rng, train)
        return self.classifier(ag.flatten(h))

    def forward(self, x, alpha=None, stats=None) -> Tensor:
        return ag.softmax(self.logits(x, alpha, stats))

    def predict(self, x, alpha=None, batch_size: int = 256) -> np.ndarray:
        """Inference-mode class probabilities, (N, n_classes)."""
        return _batched(self, x, alpha, batch_size, softmax=True)

    def predict_logits(self, x, alpha=None, batch_size: int = 256) -> np.ndarray:
        return _batched(self, x, alpha, batch_size, softmax=False)


def _batched(model: EEGNet, x, alpha, batch_size: int, softmax: bool) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=model.dtype)
    if x.ndim == 3:
        x = x[:, None]
    was_training = model.training
    model.eval()
    try:
        outs = []
        with ag.no_grad():
            for lo in range(0, len(x), batch_size):
                z = model.logits(Tensor(x[lo:lo + batch_size]), alpha)
                outs.append((ag.softmax(z) if softmax else z).data)
    finally:
        model.train(was_training)
    if not outs:
        return np.zeros((0, model.config.n_classes), dtype=model.dtype)
    return np.concatenate(outs, axis=0)


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> EEGNet:
    """Deterministic construction: same (config, seed) -> identical parameters."""
    return EEGNet(config, seed, dtype)


def predict(model: EEGNet, x) -> np.ndarray:
    return model.predict(x)


def logits(model: EEGNet, x) -> np.ndarray:
    return model.predict_logits(x)


def first_depthwise_kernels(model: EEGNet) -> np.ndarray:
    return model.first_depthwise_kernels()


# ---------------------------------------------------------------------------
# checkpoint file: one JSON header line padded to ``blob_offset``, then a raw
# little-endian float32 blob holding every tensor back to back.

CHECKPOINT_MAGIC = "KAM-CHECKPOINT"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def write_header_and_blob(path, header: dict, blob: bytes) -> None:
    from .io import atomic_write_bytes

    offset = 0
    while True:
        header["blob_offset"] = offset
        text = json.dumps(header, separators=(",", ":"))
        need = len(text.encode("utf-8")) + 1
        if need <= offset:
            break
        offset = -(-need // 64) * 64
    raw = text.encode("utf-8")
    raw = raw + b" " * (offset - 1 - len(raw)) + b"\n"
    atomic_write_bytes(path, raw + blob)


def read_header_and_blob(path, magic: str) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if not isinstance(header, dict) or header.get("magic") != magic:
        raise FormatError(f"{path}: bad magic, expected {magic}")
    if header.get("version") != 1:
        raise FormatError(f"{path}: unsupported version {header.get('version')}")
    offset = header.get("blob_offset")
    if offset != nl + 1:
        raise FormatError(f"{path}: declared blob offset {offset} does not match header end {nl + 1}")
    return header, raw[offset:]


def save_checkpoint(model: EEGNet, path, meta: dict | None = None) -> None:
    entries, chunks, pos = [], [], 0
    for kind, items in (("param", model.named_parameters()), ("buffer", model.named_buffers())):
        for name, arr in items:
            a = arr.data if isinstance(arr, Tensor) else arr
            b = np.ascontiguousarray(a, dtype="<f4").tobytes()
            entries.append({"name": name, "kind": kind, "shape": list(a.shape), "offset": pos})
            chunks.append(b)
            pos += len(b)
    header = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "dtype": "<f4",
        "seed": model.seed,
        "config": model.config.to_dict(),
        "tensors": entries,
        "blob_bytes": pos,
        "meta": meta or {},
    }
    write_header_and_blob(path, header, b"".join(chunks))


def load_checkpoint(path) -> tuple[EEGNet, dict]:
    header, blob = read_header_and_blob(path, CHECKPOINT_MAGIC)
    if len(blob) != header.get("blob_bytes"):
        raise FormatError(f"{path}: blob has {len(blob)} bytes, header declares {header.get('blob_bytes')}")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad config ({exc})") from None
    model = EEGNet(config, header.get("seed", 0), dtype=np.float32)
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        lo, hi = e["offset"], e["offset"] + 4 * n
        if hi > len(blob):
            raise FormatError(f"{path}: tensor {e['name']} runs past the blob")
        arrays[e["name"]] = np.frombuffer(blob[lo:hi], dtype="<f4").reshape(e["shape"]).astype(np.float32)
    try:
        model.load_state(arrays)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    model.eval()
    return model, header.get("meta", {})
