"""Training protocol: Adam, plateau decay on validation accuracy, best-epoch
checkpointing and the five-fold cross-validation loop.

Test folds never enter :func:`train_fold`'s epoch loop.  The caller hands
over a *sealed* test set that is opened exactly once, after the best epoch
has been chosen and its weights restored.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .datasets import EpochSet, SplitPlan, make_split
from .model import EEGNet, ModelConfig, block1_stats, build, param_count, save_checkpoint

log = logging.getLogger(__name__)

MODEL_VARIANTS = {"eegnet": "none", "kam": "kam", "qkv": "qkv", "se": "se", "cbam": "cbam"}


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-2
    decay: float = 0.75
    patience: int = 10
    max_epochs: int = 80
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        problems = []
        if not self.lr0 > 0:
            problems.append("lr0 must be positive")
        if not 0 < self.decay < 1:
            problems.append("decay must lie in (0, 1)")
        if self.patience < 1:
            problems.append("patience must be at least 1")
        if self.max_epochs < 1:
            problems.append("max_epochs must be at least 1")
        if self.batch_size < 2:
            problems.append("batch_size must be at least 2 (batch-norm)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("Adam betas must lie in [0, 1)")
        if not self.eps > 0:
            problems.append("eps must be positive")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


def model_config(name: str, base: ModelConfig | None = None, **attention) -> ModelConfig:
    """Map a benchmark model name (eegnet, kam, qkv, se, cbam) to a config."""
    if name not in MODEL_VARIANTS:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_VARIANTS)}")
    return (base or ModelConfig()).with_attention(MODEL_VARIANTS[name], **attention)


def fold_seed(seed: int, fold: int) -> int:
    """Per-fold subseed for shuffling and dropout: SeedSequence((seed, fold))."""
    return int(np.random.SeedSequence((int(seed), int(fold))).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.  Returns (new params, new state); inputs are not modified.

    A ``None`` gradient counts as zero.
    """
    if not (len(params) == len(state.m) == len(state.v) == len(grads)):
        raise ValueError("params, grads and optimizer state differ in length")
    t = state.t + 1
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape or v.shape != p.shape or (g is not None and g.shape != p.shape):
            raise ValueError(f"optimizer state shape mismatch for parameter of shape {p.shape}")
        g = np.zeros_like(p) if g is None else g
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p.append((p - step).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    return new_p, AdamState(new_m, new_v, t)


class Adam:
    """Adam bound to a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self, lr: float) -> None:
        new, self.state = adam_step([p.data for p in self.params], [p.grad for p in self.params],
                                    self.state, lr, self.beta1, self.beta2, self.eps)
        for p, d in zip(self.params, new):
            p.data = d


# ---------------------------------------------------------------------------
# plateau decay


class PlateauScheduler:
    """Multiply lr by ``decay`` after ``patience`` epochs without a strict
    improvement of validation accuracy.

    The first epoch after start (and after every decay) only sets the
    reference value and counts as one epoch without improvement, so a flat
    run decays at epochs ``patience``, ``2 * patience``, ...
    """

    def __init__(self, lr0: float, decay: float = 0.75, patience: int = 10):
        self.lr = lr0
        self.decay = decay
        self.patience = patience
        self.reference: float | None = None
        self.wait = 0

    def step(self, val_acc: float) -> float:
        """Feed one epoch's validation accuracy; return the lr for the next epoch."""
        if self.reference is None:
            self.reference, self.wait = val_acc, 1
        elif val_acc > self.reference:
            self.reference, self.wait = val_acc, 0
        else:
            self.wait += 1
        if self.wait >= self.patience:
            self.lr *= self.decay
            self.reference, self.wait = None, 0
        return self.lr


def plateau_schedule(history: Sequence[float], lr0: float, decay: float = 0.75, patience: int = 10) -> list[float]:
    """lr in force *after* each epoch of ``history`` (entry e is the lr for epoch e + 2)."""
    if len(history) == 0:
        raise ValueError("history must be nonempty")
    sched = PlateauScheduler(lr0, decay, patience)
    return [sched.step(float(v)) for v in history]


# ---------------------------------------------------------------------------
# one fold


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    return -ag.sum(ag.log_softmax(logits) * Tensor(onehot)) / len(labels)


def accuracy(model: EEGNet, data: EpochSet) -> float:
    pred = model.predict(data.data).argmax(axis=1)
    return float(np.mean(pred == data.labels))


class SealedTestSet:
    """Wraps the test fold; the data is reachable only through :meth:`open`."""

    def __init__(self, epochs: EpochSet):
        self._epochs = epochs
        self.opened = 0

    def __len__(self) -> int:
        return len(self._epochs)

    def open(self) -> EpochSet:
        self.opened += 1
        return self._epochs


@dataclass
class FoldReport:
    fold: int
    seed: int
    train_loss: list[float]
    val_acc: list[float]
    lr: list[float]
    selected_epoch: int            # 1-based
    test_acc: float
    alpha: list[float] = field(default_factory=list)
    learned_alpha: float | None = None
    init_hash: str = ""
    n_train: int = 0
    n_val: int = 0
    n_test: int = 0
    wall_time: float = 0.0

    @property
    def best_val_acc(self) -> float:
        return self.val_acc[self.selected_epoch - 1]


def select_epoch(val_acc: Sequence[float]) -> int:
    """1-based index of the best validation accuracy; ties go to the earliest."""
    if len(val_acc) == 0:
        raise ValueError("no epochs to select from")
    return int(np.argmax(np.asarray(val_acc))) + 1


Event = Callable[[str, dict], None]


def train_fold(config: ModelConfig, train: EpochSet, val: EpochSet, tcfg: TrainConfig,
               test: SealedTestSet | EpochSet | None = None, *, fold: int = 0,
               init: EEGNet | None = None, stats=None, checkpoint=None,
               on_event: Event | None = None, meta: dict | None = None) -> tuple[FoldReport, EEGNet]:
    """Train one fold and return its report and the best-epoch model (eval mode).

    ``init`` supplies starting weights (copied, not modified); otherwise the
    model is ``build(config, tcfg.seed)``.  ``stats`` is an optional pair of
    per-sample block-1 statistics aligned with ``train``.  The test set, if
    given, is opened once after selection.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be nonempty")
    if test is not None and len(test) == 0:
        raise ValueError("test set is empty")
    if isinstance(test, EpochSet):
        test = SealedTestSet(test)
    emit = on_event or (lambda kind, info: None)
    t0 = time.perf_counter()
    subseed = fold_seed(tcfg.seed, fold)

    model = build(config, tcfg.seed)
    if init is not None:
        model.load_state(init.state_arrays())
    init_hash = model.param_hash()
    model.dropout_rng = np.random.default_rng(subseed)
    shuffle_rng = np.random.default_rng(subseed + 1)
    model.train()
    opt = Adam(model.parameters(), tcfg.beta1, tcfg.beta2, tcfg.eps)
    sched = PlateauScheduler(tcfg.lr0, tcfg.decay, tcfg.patience)

    x_train = train.data.astype(model.dtype, copy=False)[:, None]
    y_train = train.labels
    use_stats = config.fused_block1 and config.D == 1
    if use_stats and stats is None:
        stats = block1_stats(train.data, config.temporal_kernel_len)

    losses, val_accs, lrs, alphas = [], [], [], []
    best_state, best_acc = None, -np.inf
    lr = tcfg.lr0
    for epoch in range(1, tcfg.max_epochs + 1):
        model.train()
        order = shuffle_rng.permutation(len(train))
        total, seen = 0.0, 0
        for lo in range(0, len(order), tcfg.batch_size):
            idx = order[lo:lo + tcfg.batch_size]
            if len(idx) < 2:       # a lone trailing sample cannot be batch-normalised
                continue
            bstats = (stats[0][idx].sum(0), stats[1][idx].sum(0)) if use_stats else None
            loss = cross_entropy(model.logits(Tensor(x_train[idx]), stats=bstats), y_train[idx])
            model.zero_grad()
            ag.backward(loss)
            opt.step(lr)
            total += float(loss.data) * len(idx)
            seen += len(idx)
        acc = accuracy(model, val)
        losses.append(total / seen)
        val_accs.append(acc)
        lrs.append(lr)
        if model.kam is not None:
            alphas.append(model.learned_alpha())
        if acc > best_acc:
            best_acc, best_state = acc, {k: v.copy() for k, v in model.state_arrays().items()}
        emit("epoch_end", {"epoch": epoch, "val_acc": acc, "lr": lr, "loss": losses[-1]})
        lr = sched.step(acc)
        if not np.isfinite(losses[-1]):
            raise FloatingPointError(f"fold {fold}: training loss diverged at epoch {epoch}")

    selected = select_epoch(val_accs)
    model.load_state(best_state)
    model.eval()
    emit("selected", {"epoch": selected, "val_acc": val_accs[selected - 1]})
    if checkpoint is not None:
        info = {"fold": fold, "selected_epoch": selected, "subseed": subseed,
                "val_acc": val_accs[selected - 1], "train_config": tcfg.to_dict()}
        save_checkpoint(model, checkpoint, {**info, **(meta or {})})

    test_acc = float("nan")
    n_test = 0
    if test is not None:
        data = test.open()
        emit("test_open", {})
        test_acc = accuracy(model, data)
        n_test = len(data)
    report = FoldReport(
        fold=fold, seed=subseed, train_loss=losses, val_acc=val_accs, lr=lrs,
        selected_epoch=selected, test_acc=test_acc, alpha=alphas,
        learned_alpha=model.learned_alpha(), init_hash=init_hash,
        n_train=len(train), n_val=len(val), n_test=n_test,
        wall_time=time.perf_counter() - t0,
    )
    log.info("fold %d: selected epoch %d, val %.4f, test %.4f (%.1fs)", fold, selected,
             report.best_val_acc, test_acc, report.wall_time)
    return report, model


# ---------------------------------------------------------------------------
# cross-validation and benchmark


@dataclass
class CVResult:
    subject: str
    model: str
    config: ModelConfig
    train_config: TrainConfig
    plan: SplitPlan
    folds: list[FoldReport]
    param_count: int

    @property
    def test_accs(self) -> np.ndarray:
        return np.array([f.test_acc for f in self.folds])

    @property
    def mean_acc(self) -> float:
        return float(self.test_accs.mean())

    @property
    def std_acc(self) -> float:
        return float(self.test_accs.std())


def run_cv(epochs: EpochSet, config: ModelConfig, tcfg: TrainConfig, *, model_name: str = "",
           n_folds: int = 5, checkpoint_dir=None, on_event: Event | None = None,
           stats=None, meta: dict | None = None) -> CVResult:
    """Five-fold CV: every fold starts from the same ``build(config, seed)`` weights.

    Epochs are expected to be normalised already.  Checkpoints are written
    as ``fold{k}.ckpt`` under ``checkpoint_dir`` when given.
    """
    plan = make_split(epochs, tcfg.seed, n_folds=n_folds)
    init = build(config, tcfg.seed)
    if stats is None and config.fused_block1 and config.D == 1:
        stats = block1_stats(epochs.data, config.temporal_kernel_len)
    val = epochs.subset(plan.validation)
    reports = []
    for k in range(n_folds):
        tr = plan.train_indices(k)
        ckpt = Path(checkpoint_dir) / f"fold{k}.ckpt" if checkpoint_dir is not None else None
        fold_stats = (stats[0][tr], stats[1][tr]) if stats is not None else None
        report, _ = train_fold(config, epochs.subset(tr), val, tcfg,
                               SealedTestSet(epochs.subset(plan.test_indices(k))),
                               fold=k, init=init, stats=fold_stats, checkpoint=ckpt, on_event=on_event,
                               meta={"split_seed": tcfg.seed, "n_folds": n_folds, "subject": epochs.subject,
                                     "model": model_name or config.attention.variant, **(meta or {})})
        reports.append(report)
    return CVResult(epochs.subject, model_name or config.attention.variant, config, tcfg, plan,
                    reports, param_count(config))


FOLD_COLUMNS = ("subject", "model", "fold", "selected_epoch", "val_acc", "test_acc", "learned_alpha", "seed")
SUMMARY_COLUMNS = ("subject", "model", "param_count", "mean_acc", "std_acc")
TABLE_COLUMNS = ("model", "param_count", "mean_acc", "std_acc")


def fold_rows(results: Sequence[CVResult], with_alpha: bool | None = None):
    """CSV header and rows, one per fold.  ``learned_alpha`` is included when
    any run carries a KAM module (or when forced via ``with_alpha``)."""
    if with_alpha is None:
        with_alpha = any(r.config.attention.variant == "kam" for r in results)
    cols = [c for c in FOLD_COLUMNS if with_alpha or c != "learned_alpha"]
    rows = []
    for r in results:
        for f in r.folds:
            row = {"subject": r.subject, "model": r.model, "fold": f.fold,
                   "selected_epoch": f.selected_epoch, "val_acc": f.best_val_acc,
                   "test_acc": f.test_acc, "learned_alpha": f.learned_alpha, "seed": f.seed}
            rows.append([row[c] for c in cols])
    return cols, rows


def summary_rows(results: Sequence[CVResult]):
    return list(SUMMARY_COLUMNS), [[r.subject, r.model, r.param_count, r.mean_acc, r.std_acc] for r in results]


def table_rows(results: Sequence[CVResult]):
    """One row per model: mean and std over all fold test accuracies of all subjects."""
    order, groups = [], {}
    for r in results:
        if r.model not in groups:
            order.append(r.model)
            groups[r.model] = (r.param_count, [])
        groups[r.model][1].extend(r.test_accs.tolist())
    rows = []
    for name in order:
        n, accs = groups[name]
        a = np.asarray(accs)
        rows.append([name, n, float(a.mean()), float(a.std())])
    return list(TABLE_COLUMNS), rows
