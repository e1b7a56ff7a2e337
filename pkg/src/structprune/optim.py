"""Adam optimizer over autodiff leaves."""

import numpy as np

from .errors import NonFiniteError


class Adam:
    """Adam with bias correction and optional decoupled weight decay.

    ``eps`` defaults to 1e-6, the BERT-Adam value.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-6, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, (p, m, v) in enumerate(zip(self.params, self._m, self._v)):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            with np.errstate(over="ignore"):
                v += (1.0 - b2) * (g * g)
            if not (np.isfinite(m).all() and np.isfinite(v).all()):
                raise NonFiniteError(f"adam: moment estimates of parameter {i} overflowed")
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            # new array rather than in-place: params may be shared with a frozen copy
            p.data = (p.data - self.lr * update).astype(p.data.dtype)
