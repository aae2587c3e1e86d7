"""
Kernel attention on a toy feature block
=======================================

The kernel attention module mixes the C feature rows of a block through
M = exp(-alpha * d2), d2 being pairwise squared distances, and returns
x + M x.  alpha = 0 gives the all-ones matrix; a large alpha gives the
identity.  Run with ``python3 notebooks/01_kernel_attention.py``.
"""
import numpy as np

from kamnet import autograd as ag
from kamnet.attention import KernelAttention, kam_apply, kernel_matrix
from kamnet.autograd import Tensor

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(0)

# four features, six values each
x = rng.standard_normal((4, 6))
d2 = ag.pairwise_sq_dists(Tensor(x)).data
print("pairwise squared distances\n", d2)

# the two limits
print("alpha = 0\n", kernel_matrix(Tensor(x), 0.0).data)
big = 20.0 / d2[~np.eye(4, dtype=bool)].min()
print(f"alpha = {big:.2f}\n", kernel_matrix(Tensor(x), big).data)

# in between, close features share more
for a in (0.05, 0.2, 1.0):
    m = kernel_matrix(Tensor(x), a).data
    print(f"alpha = {a}: mean off-diagonal weight {m[~np.eye(4, dtype=bool)].mean():.3f}")

# the module applies the same map to an (N, C, H, W) activation block
block = Tensor(x.reshape(1, 4, 1, 6))
print("output - input at alpha = 0 equals the feature sum:",
      np.allclose(kam_apply(block, 0.0).data[0, :, 0] - x, x.sum(axis=0)))

# alpha is trained through rho with alpha = a + softplus(rho), so it stays above a
kam = KernelAttention(a=-0.1, alpha_init=1.0, dtype=np.float64)
for rho in (-20.0, 0.0, 5.0):
    kam.rho.data = np.asarray(rho)
    print(f"rho {rho:6.1f} -> alpha {kam.alpha_value:.4f}")

# one trainable scalar, and its gradient comes from the tape
kam.rho = Tensor(np.asarray(0.3), requires_grad=True)
ag.backward(ag.sum(kam(block)))
print("d sum(out) / d rho =", float(kam.rho.grad))
