"""A short walk through the autodiff core.

Builds a few graphs by hand, checks them against central differences, then
runs the same check on a bidirectional GRU. Run with ``python demos/01_autodiff_tour.py``.
"""

import numpy as np

from dualkd import autodiff as ad
from dualkd.autodiff import Tensor, finite_diff_gradcheck

rng = np.random.default_rng(0)

# A scalar function of two leaves: f(a, b) = sum(tanh(a @ b) * a[:, :1])
a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
b = Tensor(rng.normal(size=(4, 4)), requires_grad=True)


def f():
    return ad.sum_(ad.tanh(ad.matmul(a, b)) * a[:, :1])


out = f()
out.backward()
print("f =", round(out.item(), 6))
print("df/da row 0:", np.round(a.grad[0], 4))

# Gradients accumulate, so clear them before asking the checker.
a.grad = b.grad = None
print("max relative error vs central differences:", f"{finite_diff_gradcheck(f, [a, b]):.2e}")

# The fused GRU is checked the same way, including its recurrent weights.
D, H = 3, 4
x = Tensor(rng.normal(size=(2, 6, D)), requires_grad=True)
s = 1 / np.sqrt(H)
fwd = [Tensor(rng.uniform(-s, s, shape), requires_grad=True) for shape in ((D, 3 * H), (H, 3 * H), (3 * H,), (3 * H,))]
bwd = [Tensor(rng.uniform(-s, s, shape), requires_grad=True) for shape in ((D, 3 * H), (H, 3 * H), (3 * H,), (3 * H,))]
w = rng.normal(size=(2, 6, 2 * H))


def g():
    return ad.sum_(ad.bidirectional_gru(x, fwd, bwd) * Tensor(w))


print("bidirectional GRU output:", ad.bidirectional_gru(x, fwd, bwd).shape)
print("GRU gradcheck:", f"{finite_diff_gradcheck(g, [x, *fwd, *bwd]):.2e}")

# Operations run under no_grad record nothing, which is how frozen teachers are evaluated.
with ad.no_grad():
    y = ad.tanh(ad.matmul(a, b))
print("graph recorded under no_grad:", y.requires_grad)
