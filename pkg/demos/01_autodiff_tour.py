"""A short walk through the tensor engine.

Builds a tiny computation by hand, runs backward, and compares against
central differences. Run with ``python demos/01_autodiff_tour.py``.
"""

import numpy as np

from structprune import autodiff as ad
from structprune.autodiff import Tensor, finite_difference_check

rng = np.random.default_rng(0)

# A two-layer perceptron on four inputs, written with raw ops.
x = Tensor(rng.normal(size=(4, 3)))
w1 = Tensor(rng.normal(size=(3, 5)) * 0.5, requires_grad=True)
b1 = Tensor(np.zeros(5, dtype=np.float32), requires_grad=True)
w2 = Tensor(rng.normal(size=(5, 2)) * 0.5, requires_grad=True)
target = np.array([0, 1, 1, 0])


def loss_fn():
    hidden = ad.gelu(ad.matmul(x, w1) + b1)
    return ad.cross_entropy(ad.matmul(hidden, w2), target)


loss = loss_fn()
loss.backward()
print(f"loss = {loss.item():.4f}")
print("dL/db1 =", np.round(b1.grad, 4))

# The same gradients, checked coordinate by coordinate.
err = finite_difference_check(loss_fn, [w1, b1, w2])
print(f"max relative error vs finite differences: {err:.2e}")

# Softmax is shift invariant, so a constant added to every logit changes nothing.
z = Tensor(np.array([0.0, np.log(3.0)], dtype=np.float32))
print("softmax([0, ln 3]) =", ad.softmax_last_axis(z).data)
print("softmax([5, 5 + ln 3]) =", ad.softmax_last_axis(z + 5.0).data)
