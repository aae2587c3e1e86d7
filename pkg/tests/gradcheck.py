"""Central finite-difference comparison shared by the gradient tests."""
import numpy as np

from kamnet import autograd as ag
from kamnet.autograd import Tensor
from kamnet.model import ModelConfig, build


def rel_err(a, b, floor=1e-12) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def check_grad(fn, *arrays, seed=0, h=1e-5, indices=None):
    """Largest relative error between reverse-mode and central differences.

    ``fn`` maps Tensors to a Tensor; a fixed random cotangent turns the
    output into a scalar.  ``indices`` maps input position -> flat indices to
    probe (all coordinates otherwise).
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    cot = rng.standard_normal(out.shape)
    ag.backward(out, cot)
    worst = 0.0
    for i, a in enumerate(arrays):
        def scalar(x, i=i):
            args = [Tensor(x) if j == i else Tensor(arrays[j]) for j in range(len(arrays))]
            with ag.no_grad():
                return float(np.sum(fn(*args).data * cot))

        idx = None if indices is None else indices.get(i)
        num = ag.finite_diff_grad(scalar, a, h=h, indices=idx)
        ana = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
        if idx is not None:
            num, ana = num.reshape(-1)[idx], ana.reshape(-1)[idx]
        worst = max(worst, rel_err(ana, num))
    return worst


def full_model_grad_error(variant, seed=2, n_probe=6):
    """Worst relative error over a random subset of every parameter and the
    input for the full float64 model on a 4-sample batch in training mode."""
    model = build(ModelConfig().with_attention(variant), seed=seed, dtype=np.float64)
    model.train()
    if variant == "qkv":
        model.slot.module.gate.data = np.asarray(0.5)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 62, 200))
    cot = rng.standard_normal((4, 3))

    def loss(inp):
        model.dropout_rng = np.random.default_rng(99)       # same dropout mask every call
        return ag.sum(model.logits(inp) * Tensor(cot))

    def probe(size, k):
        return sorted(rng.choice(size, size=min(size, k), replace=False).tolist())

    xt = Tensor(x, requires_grad=True)
    model.zero_grad()
    ag.backward(loss(xt))
    worst = 0.0
    for _, p in model.named_parameters():
        idx, base = probe(p.size, n_probe), p.data

        def f(v, p=p):
            p.data = v
            with ag.no_grad():
                return float(loss(Tensor(x)).data)

        num = ag.finite_diff_grad(f, base, indices=idx).reshape(-1)[idx]
        p.data = base
        # bn2 undoes any shift and (up to eps) any scale of bn1's output, so
        # the bn1 affine gradients are ~0 and FD noise needs the floor
        worst = max(worst, rel_err(p.grad.reshape(-1)[idx], num, floor=1e-3))

    def fx(v):
        with ag.no_grad():
            return float(loss(Tensor(v)).data)

    idx = probe(x.size, 2 * n_probe)
    num = ag.finite_diff_grad(fx, x, indices=idx).reshape(-1)[idx]
    return max(worst, rel_err(xt.grad.reshape(-1)[idx], num, floor=1e-3))
