"""
Training one fold and looking inside
====================================

A small synthetic subject, one cross-validation fold of the kernel attention
model, then the post-hoc analyses: accuracy against alpha, d logit / d alpha,
a prediction transition curve and the first spatial kernel.  Uses a reduced
montage and 48 Hz epochs so it runs in seconds.
Run with ``python3 notebooks/02_train_and_inspect.py``.
"""
import numpy as np

from kamnet.datasets import LABEL_NAMES, make_split, normalized, synth_generate
from kamnet.interpret import alpha_sweep, export_channel_weights, partial_dependence, ptc
from kamnet.model import ModelConfig
from kamnet.trainer import SealedTestSet, TrainConfig, train_fold

np.set_printoptions(precision=3, suppress=True)

electrodes = ("FP1", "FZ", "F8", "C3", "CZ", "C4", "POZ", "O1")
data = normalized(synth_generate(60, fs=48, seed=0, snr=2.0, subject="demo", electrodes=electrodes))
print(f"{len(data)} epochs of {data.data.shape[1]} channels x {data.data.shape[2]} samples")

plan = make_split(data, seed=0)
train, val = data.subset(plan.train_indices(0)), data.subset(plan.validation)
test = SealedTestSet(data.subset(plan.test_indices(0)))
print(f"train {len(train)}, validation {len(val)}, test {len(test)}")

cfg = ModelConfig(n_channels=8, n_samples=48, F1=4, F2=8, temporal_kernel_len=9, separable_kernel_len=4,
                  electrodes=electrodes).with_attention("kam")
report, model = train_fold(cfg, train, val, TrainConfig(max_epochs=15, batch_size=16, seed=0), test)

print("\nepoch  loss    val    lr      alpha")
for e, (loss, acc, lr, a) in enumerate(zip(report.train_loss, report.val_acc, report.lr, report.alpha), 1):
    mark = "  <- selected" if e == report.selected_epoch else ""
    print(f"{e:5d}  {loss:.3f}  {acc:.3f}  {lr:.4f}  {a:.3f}{mark}")
print(f"test accuracy {report.test_acc:.3f}, learned alpha {report.learned_alpha:.3f}")

# accuracy with alpha forced to other values, all else frozen
sweep = alpha_sweep(model, test.open(), [0.0, 0.1, report.learned_alpha, 3.0, 30.0])
print("\nalpha    overall  " + "  ".join(LABEL_NAMES))
for row in sweep.rows():
    print("  ".join(f"{v:7.3f}" for v in row))

# sensitivity of each class score to alpha, averaged over five epochs
grid = np.array([0.01, 0.1, 1.0, 10.0])
grads = partial_dependence(model, val.data[:5], grid)
print("\nmean d logit / d alpha (rows: alpha, columns: class)\n", np.column_stack([grid, grads.mean(axis=1)]))

# morph a positive epoch into a negative one and watch the softmax output
i = int(np.flatnonzero(val.labels == 0)[0])
j = int(np.flatnonzero(val.labels == 2)[0])
curve = ptc(model, val.data[i], val.data[j], n_steps=11)
print("\nu      " + "  ".join(LABEL_NAMES))
for u, p in zip(curve.u, curve.probs):
    print(f"{u:.1f}  " + "  ".join(f"{v:8.3f}" for v in p))

# with one model the fold spread is zero; the CLI feeds all five fold checkpoints
cmap = export_channel_weights([model])
print("\nfirst spatial kernel, max-abs normalised")
for name, w in zip(cmap.electrodes, cmap.mean_normalized):
    print(f"{name:4s} {w:+.3f} " + "#" * int(round(abs(w) * 20)))
