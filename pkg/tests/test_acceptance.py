"""Acceptance criteria 1-8.  Each test records a pass/fail line that the
terminal summary prints (see conftest.py).

Criterion 4 runs the full benchmark (2 synthetic subjects x 5 models x
5 folds x 80 epochs) through the CLI and takes most of the suite's time.
"""
import csv
import json
import time

import numpy as np
import pytest

from kamnet import autograd as ag
from kamnet.attention import AttentionChoice, AttentionSlot, KernelAttention, kam_apply, kernel_matrix
from kamnet.autograd import Tensor
from kamnet.calibration import enumerate_cbam, enumerate_qkv
from kamnet.cli import main
from kamnet.datasets import load_epochs, save_epochs
from kamnet.interpret import alpha_sweep, partial_dependence, ptc
from kamnet.layers import BatchNorm2d, SeparableConv2d, avg_pool, batchnorm, dense, dropout
from kamnet.model import ModelConfig, build, load_checkpoint, param_count, save_checkpoint
from kamnet.trainer import SealedTestSet, TrainConfig, plateau_schedule, run_cv, select_epoch, train_fold

from conftest import ACCEPTANCE, tiny_config, tiny_data
from gradcheck import check_grad, full_model_grad_error, rel_err


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- 1. parameter deltas ----------------------------------------------------------------

def test_criterion_1_parameter_deltas():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    counts = {v: build(cfg.with_attention(v)).param_count() for v in ("none", "kam", "se", "cbam", "qkv")}
    deltas = {v: n - counts["none"] for v, n in counts.items()}
    formula_agrees = all(param_count(cfg.with_attention(v)) == n for v, n in counts.items())
    oracle = len(enumerate_qkv()) > 0 and len(enumerate_cbam()) == 1
    ok = (counts["none"] == 3851 and deltas == {"none": 0, "kam": 1, "se": 82, "cbam": 182, "qkv": 1089}
          and formula_agrees and oracle and time.perf_counter() - t0 < 10)
    record(1, ok, f"counts {counts}, deltas {deltas}")


# -- 2. kernel limits --------------------------------------------------------------------

def test_criterion_2_kernel_limits():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_j = worst_i = 0.0
    for _ in range(100):
        x = rng.standard_normal((int(rng.integers(2, 17)), int(rng.integers(1, 40))))
        worst_j = max(worst_j, np.abs(kernel_matrix(Tensor(x), 0.0).data - 1).max())
        d = ag.pairwise_sq_dists(Tensor(x)).data
        dmin = d[~np.eye(len(x), dtype=bool)].min()
        worst_i = max(worst_i, np.abs(kernel_matrix(Tensor(x), 20.0 / dmin).data - np.eye(len(x))).max())
    elapsed = time.perf_counter() - t0
    record(2, worst_j <= np.finfo(float).eps and worst_i < 1e-6 and elapsed < 1.0,
           f"max|M-J| {worst_j:.1e}, max|M-I| {worst_i:.1e}, {elapsed:.2f}s")


# -- 3. gradient oracle -------------------------------------------------------------------

def test_criterion_3_gradient_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    r = rng.standard_normal
    prim = {}
    prim["conv_fft"] = check_grad(lambda a, b: ag.conv2d(a, b, "same", 3), r((2, 3, 1, 40)), r((3, 1, 1, 31)))
    prim["conv_general"] = check_grad(lambda a, b: ag.conv2d(a, b, "same", 1), r((2, 2, 4, 7)), r((3, 2, 3, 3)))
    prim["pairwise"] = check_grad(ag.pairwise_sq_dists, r((5, 4)))
    bn = BatchNorm2d(3, dtype=np.float64)

    def bn_f(x, g, b):
        bn.gamma, bn.beta = g, b
        return batchnorm(x, bn, training=True)

    prim["batchnorm"] = check_grad(bn_f, r((4, 3, 2, 3)), r(3) + 1, r(3))
    prim["avg_pool"] = check_grad(lambda t: avg_pool(t, (1, 2)), r((2, 3, 1, 8)))
    prim["dense"] = check_grad(dense, r((4, 5)), r((5, 3)), r(3))
    sep = SeparableConv2d(4, 6, (1, 5), dtype=np.float64)

    def sep_f(x, wd, wp):
        sep.depthwise.weight, sep.pointwise.weight = wd, wp
        return sep(x)

    prim["separable"] = check_grad(sep_f, r((2, 4, 1, 9)), r((4, 1, 1, 5)), r((6, 4, 1, 1)))
    prim["dropout"] = check_grad(lambda t: dropout(t, 0.25, np.random.default_rng(0), True), r((4, 6)))
    kam = KernelAttention(a=-0.1, dtype=np.float64)

    def kam_f(x, rho):
        kam.rho = rho
        return kam(x)

    prim["kam_rho"] = check_grad(kam_f, r((2, 4, 1, 5)) * 0.5, np.asarray(0.2))
    prim["kam_alpha"] = check_grad(lambda t, a: kam_apply(t, a), r((2, 4, 1, 5)) * 0.5, np.asarray(0.3))
    for v in ("se", "cbam", "qkv"):
        prim[v] = _slot_grad_error(v)

    full = {v: full_model_grad_error(v) for v in ("none", "kam", "se", "cbam", "qkv")}

    # d logit_i / d alpha on a trained-shape model, against central differences
    model = build(ModelConfig().with_attention("kam"), seed=4)
    x = r((2, 62, 200))
    grid = np.array([0.0, 0.5, 2.0])
    pd = partial_dependence(model, x, grid)
    work = model.astype(np.float64)
    work.eval()
    h = 1e-6
    num = np.stack([(work.logits(Tensor(x), alpha=a + h).data - work.logits(Tensor(x), alpha=a - h).data) / (2 * h)
                    for a in grid])
    full["dlogit_dalpha"] = rel_err(pd, num)

    elapsed = time.perf_counter() - t0
    worst_prim, worst_full = max(prim.values()), max(full.values())
    record(3, worst_prim < 1e-6 and worst_full < 1e-4 and elapsed < 120,
           f"primitives max {worst_prim:.1e}, full model max {worst_full:.1e}, {elapsed:.1f}s")


def _slot_grad_error(variant):
    kw = {"reduction": 2} if variant in ("se", "cbam") else {}
    slot = AttentionSlot(AttentionChoice(variant, **kw), 4, rng=np.random.default_rng(0), dtype=np.float64)
    slot.train()
    if variant == "qkv":
        slot.module.gate.data = np.asarray(0.7)
    named = list(slot.named_parameters())
    owners = []
    for name, _ in named:
        parts, obj = name.split("."), slot
        for p in parts[:-1]:
            obj = getattr(obj, p)
        owners.append((obj, parts[-1]))

    def f(x, *params):
        for (obj, attr), p in zip(owners, params):
            setattr(obj, attr, p)
        return slot(x)

    x = np.random.default_rng(1).standard_normal((3, 4, 2, 5)) * 0.5
    return check_grad(f, x, *[p.data.copy() for _, p in named])


# -- 4. synthetic benchmark ---------------------------------------------------------------

@pytest.mark.slow
def test_criterion_4_synthetic_benchmark(tmp_path):
    t0 = time.perf_counter()
    paths = []
    for seed, subject in ((1, "S01"), (2, "S02")):
        path = tmp_path / f"{subject}.epochs"
        assert main(["synth", "--n-per-class", "300", "--snr", "4", "--seed", str(seed),
                     "--subject", subject, "--out", str(path)]) == 0
        paths.append(str(path))
    code = main(["bench", "--data", *paths, "--out-dir", str(tmp_path / "bench")])
    elapsed = time.perf_counter() - t0
    table = read_csv(tmp_path / "bench" / "table.csv")
    folds = read_csv(tmp_path / "bench" / "folds.csv")
    worst = {}
    for row in folds:
        worst[row["model"]] = min(worst.get(row["model"], 1.0), float(row["val_acc"]))
    table_line = ", ".join(f"{r['model']} {float(r['mean_acc']):.3f}+-{float(r['std_acc']):.3f}" for r in table)
    ok = (code == 0 and len(table) == 5 and len(folds) == 50 and len(worst) == 5
          and min(worst.values()) >= 0.98 - 1e-12 and elapsed < 1800)
    record(4, ok, f"{elapsed / 60:.1f} min; worst fold best-val {worst}; test {table_line}")


# -- 5. protocol fidelity -----------------------------------------------------------------

class _Spy(SealedTestSet):
    def __init__(self, epochs, log):
        super().__init__(epochs)
        self.log = log

    def open(self):
        self.log.append("open")
        return super().open()


def test_criterion_5_protocol_fidelity():
    ep = tiny_data(n_per_class=30, seed=9)
    res = run_cv(ep, tiny_config("kam"), TrainConfig(max_epochs=3, batch_size=16, seed=4))
    same_init = len({f.init_hash for f in res.folds}) == 1

    flat = plateau_schedule([0.5] * 25, lr0=1.0)
    decays = [e for e in range(1, 25) if flat[e] != flat[e - 1]]
    ratios = {flat[e] / flat[e - 1] for e in decays}
    bumped = plateau_schedule([0.5] * 8 + [0.6] * 12, lr0=1.0)
    scheduler_ok = decays == [9, 19] and ratios == {0.75} and bumped[9] == bumped[17] == 1.0 and bumped[18] == 0.75

    earliest = select_epoch([0.2, 0.8, 0.8, 0.5, 0.8]) == 2
    idx = np.arange(len(ep))
    log = []
    report, _ = train_fold(tiny_config("kam"), ep.subset(idx[:60]), ep.subset(idx[60:75]),
                           TrainConfig(max_epochs=3, batch_size=16, seed=4), _Spy(ep.subset(idx[75:]), log),
                           on_event=lambda kind, info: log.append(kind))
    sealed = log == ["epoch_end"] * 3 + ["selected", "open", "test_open"]
    record(5, same_init and scheduler_ok and earliest and sealed,
           f"identical init {same_init}, decays after epochs {[d + 1 for d in decays]}, "
           f"earliest-best {earliest}, test opened after selection {sealed}")


# -- 6. interpretability contracts -------------------------------------------------------

def test_criterion_6_interpretability():
    ep = tiny_data(n_per_class=30, seed=12)
    idx = np.arange(len(ep))
    te = ep.subset(idx[72:])
    report, model = train_fold(tiny_config("kam"), ep.subset(idx[:60]), ep.subset(idx[60:72]),
                               TrainConfig(max_epochs=4, batch_size=16, seed=6), te)
    fwd = ptc(model, te.data[0], te.data[1])
    back = ptc(model, te.data[1], te.data[0])
    direct = model.predict(te.data[:2])
    endpoints = max(np.abs(fwd.probs[0] - direct[0]).max(), np.abs(fwd.probs[-1] - direct[1]).max())
    simplex = np.abs(fwd.probs.sum(axis=1) - 1).max()
    symmetric = np.abs(fwd.probs - back.probs[::-1]).max()

    sweep = alpha_sweep(model, te, [0.0, model.learned_alpha()])
    reproduces = sweep.acc_overall[1] == report.test_acc
    oracle = build(model.config)
    oracle.load_state(model.state_arrays())
    oracle.eval()
    oracle.kam.kernel_fn = lambda X, a: Tensor(np.ones(X.shape[:-1] + (X.shape[-2],), dtype=X.dtype))
    zero_ok = sweep.acc_overall[0] == np.mean(oracle.predict(te.data).argmax(1) == te.labels)
    record(6, endpoints < 1e-6 and simplex < 1e-6 and symmetric == 0 and reproduces and zero_ok,
           f"endpoints {endpoints:.1e}, simplex {simplex:.1e}, symmetry {symmetric:.1e}, "
           f"learned-alpha sweep = test acc {reproduces}, alpha=0 matches J oracle {zero_ok}")


# -- 7. determinism -----------------------------------------------------------------------

def _run_all(d, data):
    small = ["--epochs", "2", "--batch-size", "16"]
    assert main(["cv", "--data", data, "--model", "kam", *small, "--out-dir", str(d / "cv")]) == 0
    assert main(["bench", "--data", data, "--models", "se", "qkv", *small, "--out-dir", str(d / "bench")]) == 0
    ck = str(d / "cv" / "fold0.ckpt")
    assert main(["sweep", "--checkpoint", ck, "--data", data, "--out", str(d / "sweep.csv")]) == 0
    assert main(["pdp", "--checkpoint", ck, "--data", data, "--samples", "4", "--out", str(d / "pdp.csv")]) == 0
    assert main(["ptc", "--checkpoint", ck, "--data", data, "--i", "1", "--j", "2", "--out", str(d / "ptc.csv")]) == 0
    cks = [str(d / "cv" / f"fold{k}.ckpt") for k in range(5)]
    assert main(["channels", "--checkpoints", *cks, "--out", str(d / "channels.csv")]) == 0


def _blob(path):
    raw = path.read_bytes()
    return raw[json.loads(raw[:raw.index(b"\n")])["blob_offset"]:]


def test_criterion_7_determinism(tmp_path):
    data = str(tmp_path / "d.epochs")
    assert main(["synth", "--n-per-class", "12", "--fs", "48", "--seed", "3", "--out", data]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    _run_all(a, data)
    _run_all(b, data)
    csvs = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    ckpts = sorted(p.relative_to(a) for p in a.rglob("*.ckpt"))
    same_csv = all((a / p).read_bytes() == (b / p).read_bytes() for p in csvs)
    same_blob = all(_blob(a / p) == _blob(b / p) for p in ckpts)
    record(7, same_csv and same_blob and len(csvs) == 9 and len(ckpts) == 15,
           f"{len(csvs)} CSVs identical {same_csv}, {len(ckpts)} checkpoint blobs identical {same_blob}")


# -- 8. format round-trips ------------------------------------------------------------------

def test_criterion_8_round_trips(tmp_path):
    ep = tiny_data(n_per_class=10, seed=1)
    save_epochs(ep, tmp_path / "e.epochs")
    back = load_epochs(tmp_path / "e.epochs")
    epochs_ok = back.data.tobytes() == ep.data.tobytes() and np.array_equal(back.labels, ep.labels)

    model = build(tiny_config("kam"), seed=8)
    save_checkpoint(model, tmp_path / "m.ckpt", {"fold": 0})
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    save_checkpoint(loaded, tmp_path / "m2.ckpt", {"fold": 0})
    ckpt_ok = (loaded.param_hash() == model.param_hash()
               and (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes())

    raw = (tmp_path / "e.epochs").read_bytes()
    (tmp_path / "bad.epochs").write_bytes(raw.replace(b"KAM-EPOCHS", b"KAM-EPOCHX", 1))
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw.replace(b"\"version\":1", b"\"version\":7", 1))
    bad_data = main(["cv", "--data", str(tmp_path / "bad.epochs"), "--out-dir", str(tmp_path / "o")])
    bad_ckpt = main(["channels", "--checkpoints", str(tmp_path / "bad.ckpt"), "--out", str(tmp_path / "c.csv")])
    record(8, epochs_ok and ckpt_ok and bad_data != 0 and bad_ckpt != 0,
           f"epochs bit-exact {epochs_ok}, checkpoint bit-exact {ckpt_ok}, "
           f"corrupt header exits {bad_data}/{bad_ckpt}")
