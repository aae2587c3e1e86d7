"""Post-hoc analyses of trained KAM models and channel-weight export.

* :func:`alpha_sweep` re-evaluates a model with alpha overridden.
* :func:`partial_dependence` collects d logit_i / d alpha per sample.
* :func:`ptc` traces softmax outputs along a linear morph between two epochs.
* :func:`export_channel_weights` summarises first-layer spatial kernels over folds.

None of these modify the model they are given.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .datasets import EpochSet, LABEL_NAMES
from .io import write_csv
from .model import EEGNet

SWEEP_COLUMNS = ("alpha", "acc_overall", "acc_pos", "acc_neu", "acc_neg")
PTC_COLUMNS = ("u", "p_pos", "p_neu", "p_neg")
CHANNEL_COLUMNS = ("electrode", "mean", "std", "mean_normalized", "std_normalized")
PDP_COLUMNS = ("alpha", "sample", "d_pos", "d_neu", "d_neg")
PTC_STEPS = 51


def _require_kam(model: EEGNet):
    if model.kam is None:
        raise ValueError(f"model has no kernel attention module (attention variant "
                         f"{model.config.attention.variant!r})")
    return model.kam


def _check_grid(model: EEGNet, grid) -> np.ndarray:
    kam = _require_kam(model)
    grid = np.asarray(grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise ValueError("alpha grid is empty")
    if not np.all(np.isfinite(grid)):
        raise ValueError("alpha grid must be finite")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("alpha grid must be strictly increasing")
    if np.any(grid <= kam.a):
        raise ValueError(f"alpha must exceed the lower bound a={kam.a}; got min {grid.min()}")
    return grid


def default_alpha_grid(model: EEGNet, n: int = 25) -> np.ndarray:
    """Log-spaced grid from max(a, 0) + 1e-4 to 1, plus the learned alpha."""
    kam = _require_kam(model)
    lo = max(kam.a, 0.0) + 1e-4
    grid = np.concatenate([np.geomspace(lo, 1.0, n), [model.learned_alpha()]])
    return np.unique(grid)


# ---------------------------------------------------------------------------
# alpha sweep


@dataclass
class AlphaSweepResult:
    alpha: np.ndarray              # (n,)
    acc_overall: np.ndarray        # (n,)
    acc_per_label: np.ndarray      # (n, 3), per-class recall
    learned_alpha: float

    def rows(self):
        return [[float(a), float(o), *map(float, p)]
                for a, o, p in zip(self.alpha, self.acc_overall, self.acc_per_label)]


def _accuracies(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> tuple[float, list[float]]:
    per = []
    for c in range(n_classes):
        mask = labels == c
        per.append(float(np.mean(pred[mask] == c)) if mask.any() else float("nan"))
    return float(np.mean(pred == labels)), per


def alpha_sweep(model: EEGNet, data: EpochSet, grid) -> AlphaSweepResult:
    """Accuracy with alpha forced to each grid value, every other parameter frozen."""
    grid = _check_grid(model, grid)
    overall, per = [], []
    for a in grid:
        pred = model.predict(data.data, alpha=float(a)).argmax(axis=1)
        o, p = _accuracies(pred, data.labels, model.config.n_classes)
        overall.append(o)
        per.append(p)
    return AlphaSweepResult(grid, np.array(overall), np.array(per), model.learned_alpha())


# ---------------------------------------------------------------------------
# d logit / d alpha


def partial_dependence(model: EEGNet, samples, grid, dtype=np.float64) -> np.ndarray:
    """Gradients of each pre-softmax output with respect to alpha.

    Returns an array of shape (len(grid), n_samples, n_classes).  Inference
    mode, on a ``dtype`` copy of the model; alpha enters as a per-sample
    leaf so one backward pass per class yields every sample's derivative.
    """
    grid = _check_grid(model, grid)
    x = np.asarray(samples.data if isinstance(samples, EpochSet) else samples)
    if x.ndim == 2:
        x = x[None]
    work = model.astype(dtype)
    work.eval()
    N, K = len(x), model.config.n_classes
    out = np.empty((len(grid), N, K))
    xt = Tensor(x.astype(dtype))
    for gi, a in enumerate(grid):
        alpha = Tensor(np.full(N, a, dtype=dtype), requires_grad=True)
        z = work.logits(xt, alpha=alpha)
        for k in range(K):
            alpha.grad = None
            cot = np.zeros(z.shape, dtype=dtype)
            cot[:, k] = 1
            ag.backward(z, cot)
            out[gi, :, k] = alpha.grad
    return out


# ---------------------------------------------------------------------------
# prediction transition curves


@dataclass
class PtcRecord:
    i: int | None
    j: int | None
    u: np.ndarray                  # (n_steps,)
    probs: np.ndarray              # (n_steps, n_classes)

    def rows(self):
        return [[float(u), *map(float, p)] for u, p in zip(self.u, self.probs)]


def ptc(model: EEGNet, x_i, x_j, n_steps: int = PTC_STEPS, i: int | None = None, j: int | None = None) -> PtcRecord:
    """Softmax outputs along (1 - u) x_i + u x_j for u = k / (n_steps - 1).

    The weights are formed as integer ratios, so swapping the endpoints
    reproduces the same inputs in reverse order exactly.
    """
    x_i, x_j = np.asarray(x_i), np.asarray(x_j)
    if x_i.shape != x_j.shape:
        raise ValueError(f"endpoint shapes differ: {x_i.shape} vs {x_j.shape}")
    if n_steps < 2:
        raise ValueError("n_steps must be at least 2")
    k = np.arange(n_steps, dtype=np.float64)
    wj = k / (n_steps - 1)
    wi = (n_steps - 1 - k) / (n_steps - 1)
    xi, xj = x_i.astype(np.float64), x_j.astype(np.float64)
    path = wi[:, None, None] * xi[None] + wj[:, None, None] * xj[None]
    probs = np.empty((n_steps, model.config.n_classes), dtype=np.float64)
    for s in range(n_steps):
        # one point per call keeps each output independent of its neighbours
        probs[s] = model.predict(path[s:s + 1])[0]
    return PtcRecord(i, j, wj, probs)


# ---------------------------------------------------------------------------
# channel weights


@dataclass
class ChannelWeightMap:
    kernels: np.ndarray            # (n_folds, F1*D, n_channels)
    kernel_index: int
    mean: np.ndarray
    std: np.ndarray
    mean_normalized: np.ndarray
    std_normalized: np.ndarray
    electrodes: tuple[str, ...]
    normalization: str = "maxabs"

    def rows(self):
        return [[e, float(m), float(s), float(mn), float(sn)] for e, m, s, mn, sn in
                zip(self.electrodes, self.mean, self.std, self.mean_normalized, self.std_normalized)]


def _maxabs(v: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(v))
    return v / peak if peak > 0 else np.zeros_like(v)


def export_channel_weights(models: Sequence[EEGNet], kernel_index: int = 0) -> ChannelWeightMap:
    """Electrode-wise mean and std across folds of one spatial kernel."""
    if len(models) == 0:
        raise ValueError("no models given")
    ref = models[0].config
    for n, m in enumerate(models[1:], start=1):
        if m.config != ref:
            raise ValueError(f"model {n} was built from a different configuration than model 0")
    kernels = np.stack([m.first_depthwise_kernels().astype(np.float64) for m in models])
    if not 0 <= kernel_index < kernels.shape[1]:
        raise ValueError(f"kernel_index {kernel_index} outside [0, {kernels.shape[1]})")
    sel = kernels[:, kernel_index]
    mean, std = sel.mean(axis=0), sel.std(axis=0)
    return ChannelWeightMap(kernels, kernel_index, mean, std, _maxabs(mean), _maxabs(std), ref.electrodes)


# ---------------------------------------------------------------------------
# CSV output


def write_alpha_sweep(path, result: AlphaSweepResult) -> None:
    write_csv(path, SWEEP_COLUMNS, result.rows())


def write_ptc(path, record: PtcRecord) -> None:
    write_csv(path, PTC_COLUMNS, record.rows())


def write_channel_weights(path, cmap: ChannelWeightMap) -> None:
    write_csv(path, CHANNEL_COLUMNS, cmap.rows())


def write_partial_dependence(path, grid, grads: np.ndarray, sample_ids=None) -> None:
    n = grads.shape[1]
    ids = range(n) if sample_ids is None else sample_ids
    rows = [[float(a), int(s), *map(float, grads[gi, si])]
            for gi, a in enumerate(grid) for si, s in enumerate(ids)]
    write_csv(path, PDP_COLUMNS, rows)


__all__ = [
    "AlphaSweepResult", "PtcRecord", "ChannelWeightMap", "alpha_sweep", "partial_dependence", "ptc",
    "export_channel_weights", "default_alpha_grid", "write_alpha_sweep", "write_ptc",
    "write_channel_weights", "write_partial_dependence", "LABEL_NAMES",
]
