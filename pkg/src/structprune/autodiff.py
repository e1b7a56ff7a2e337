"""A small dense-tensor engine with reverse-mode automatic differentiation.

Every op records its inputs and a closure computing input gradients from the
output gradient. ``Tensor.backward`` walks the recorded graph once in reverse
topological order. Values are stored as numpy arrays, float32 by default;
float64 arrays are carried through untouched so gradient oracles can re-run a
computation in double precision.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

GELU_COEF = 0.7978845608  # sqrt(2 / pi)
_GELU_CUBIC = 0.044715

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled():
    return _grad_enabled


def _as_array(value):
    if isinstance(value, np.ndarray) and value.dtype in (np.float32, np.float64):
        return value
    arr = np.asarray(value)
    if arr.dtype == np.float64 and not isinstance(value, np.ndarray):
        # python floats and lists default to the engine's float32
        return arr.astype(np.float32)
    if arr.dtype not in (np.float32, np.float64):
        return arr.astype(np.float32)
    return arr


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values in result")


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense array node in the autodiff graph.

    Only leaves (tensors created directly by the user) accumulate ``grad``;
    intermediate results pass gradients through without storing them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        arr = _as_array(data)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data, parents, backward, op):
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _wrap(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # -- autodiff ---------------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that is not connected to any parameter")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = g.astype(node.data.dtype, copy=True)
                else:
                    node.grad = node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise binary ---------------------------------------------------

    def _binary(self, other, forward, backward, op):
        other = self._wrap(other)
        try:
            np.broadcast_shapes(self.shape, other.shape)
        except ValueError:
            raise DimensionError(
                f"{op}: shapes {self.shape} and {other.shape} are not broadcastable"
            ) from None
        a, b = self.data, other.data
        out = forward(a, b)

        def grad_fn(g):
            ga, gb = backward(g, a, b, out)
            return (
                None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape),
            )

        return Tensor._result(out, (self, other), grad_fn, op)

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, a, b, o: (g, g), "add")

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b, o: (g, -g), "sub")

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __mul__(self, other):
        return self._binary(other, np.multiply, lambda g, a, b, o: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(
            other, np.divide, lambda g, a, b, o: (g / b, -g * a / (b * b)), "div"
        )

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    # -- linear algebra -------------------------------------------------------

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops --------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape
        return Tensor._result(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape"
        )

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._result(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose"
        )

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def __getitem__(self, index):
        src_shape, dtype = self.data.shape, self.data.dtype

        def grad_fn(g):
            full = np.zeros(src_shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._result(np.array(self.data[index]), (self,), grad_fn, "getitem")

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        src = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._result(np.asarray(out, dtype=self.data.dtype), (self,), grad_fn, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- unary ----------------------------------------------------------------

    def relu(self):
        x = self.data
        keep = x > 0
        return Tensor._result(np.where(keep, x, 0).astype(x.dtype), (self,), lambda g: (g * keep,), "relu")

    def gelu(self):
        x = self.data
        x2 = x * x
        inner = GELU_COEF * x * (1.0 + _GELU_CUBIC * x2)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def grad_fn(g):
            dinner = GELU_COEF * (1.0 + 3.0 * _GELU_CUBIC * x2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

        return Tensor._result(out.astype(x.dtype), (self,), grad_fn, "gelu")

    def exp(self):
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        x = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)
        return Tensor._result(out, (self,), lambda g: (g / x,), "log")

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self):
        out = (0.5 * (1.0 + np.tanh(0.5 * self.data))).astype(self.data.dtype)
        return Tensor._result(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def clamp(self, low=None, high=None):
        x = self.data
        out = np.clip(x, low, high)
        inside = np.ones(x.shape, dtype=bool)
        if low is not None:
            inside &= x >= low
        if high is not None:
            inside &= x <= high
        return Tensor._result(out, (self,), lambda g: (g * inside,), "clamp")

    def softmax(self):
        return softmax_last_axis(self)

    def log_softmax(self):
        return log_softmax_last_axis(self)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# free-function ops
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes, numpy-style batch broadcasting."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul: batch dims of {a.shape} and {b.shape} are not broadcastable"
        ) from None
    x, w = a.data, b.data
    out = x @ w

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(w, -1, -2), x.shape)
        if b.requires_grad:
            if w.ndim == 2 and x.ndim > 2:
                # fold batch axes into one big product instead of summing afterwards
                gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, w.shape)
        return ga, gb

    return Tensor._result(out, (a, b), grad_fn, "matmul")


def relu(x):
    return x.relu()


def gelu(x):
    return x.gelu()


def elementwise(x, kind, other=None):
    """Dispatch by name: ``relu``, ``gelu``, ``mul`` or ``add``."""
    if kind == "relu":
        return x.relu()
    if kind == "gelu":
        return x.gelu()
    if kind == "mul":
        return x * other
    if kind == "add":
        return x + other
    raise ValueError(f"unknown elementwise kind {kind!r}")


def softmax_last_axis(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._result(out, (x,), grad_fn, "softmax")


def log_softmax_last_axis(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, (x,), grad_fn, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize each row of the last axis, then apply ``gain`` and ``bias``."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last axis {n}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            # the three terms nearly cancel; do the sum in double precision
            c64 = xd.astype(np.float64) - xd.astype(np.float64).mean(axis=-1, keepdims=True)
            inv64 = 1.0 / np.sqrt((c64 * c64).mean(axis=-1, keepdims=True) + eps)
            xhat64 = c64 * inv64
            dxhat = g.astype(np.float64) * gain.data
            gx = inv64 * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat64 * (dxhat * xhat64).mean(axis=-1, keepdims=True)
            )
            gx = gx.astype(xd.dtype)
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        return gx, ggain, gbias

    return Tensor._result(out.astype(xd.dtype), (x, gain, bias), grad_fn, "layer_norm")


def cross_entropy(logits, target):
    """Mean negative log-likelihood of integer targets under row softmax.

    ``logits`` is ``[n, c]`` (a single ``[c]`` row is accepted) and ``target``
    an int or a length-``n`` int array.
    """
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    n, c = logits.shape
    target = np.atleast_1d(np.asarray(target))
    if target.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows but target shape {target.shape}")
    if target.size and (target.min() < 0 or target.max() >= c):
        raise IndexError(f"cross_entropy: target out of range for {c} classes")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, target].mean()

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, target] -= 1.0
        return (p * (g / n),)

    out = np.asarray(loss, dtype=logits.data.dtype)
    return Tensor._result(out, (logits,), grad_fn, "cross_entropy")


def embedding(table, ids):
    """Gather rows of ``table`` (``[vocab, dim]``) for an int array ``ids``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return Tensor._result(out, (table,), grad_fn, "embedding")


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def _sample_coordinates(params, max_coords, rng):
    """Spread ``max_coords`` coordinates over the params, at least one each."""
    picks = []
    per = max(1, max_coords // max(1, len(params)))
    for i, p in enumerate(params):
        k = min(per, p.size)
        flat = rng.choice(p.size, size=k, replace=False) if k < p.size else np.arange(p.size)
        picks.extend((i, int(j)) for j in np.sort(flat))
    return picks


def finite_difference_check(f, params, h=1e-3, max_coords=64, seed=0, oracle_dtype=np.float64, stencil=5):
    """Compare backprop gradients of ``f()`` against central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from ``params``.
    The analytic gradient is taken in the params' native dtype. The numeric
    side re-evaluates ``f`` with the params temporarily cast to
    ``oracle_dtype`` (pass ``None`` to keep the native dtype), so the oracle's
    rounding error does not swamp the comparison. ``stencil=5`` uses the
    fourth-order central difference, ``stencil=3`` the plain one; the
    higher order matters for coordinates whose gradient is near zero while
    the third derivative is not.

    Returns the max over sampled coordinates of
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-8)``.
    """
    if stencil not in (3, 5):
        raise ValueError(f"stencil must be 3 or 5, got {stencil}")
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.requires_grad:
        loss.backward()
    analytic = [
        np.zeros(p.shape, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
        for p in params
    ]
    originals = [p.data for p in params]
    rng = np.random.default_rng(seed)
    coords = _sample_coordinates(params, max_coords, rng)
    worst = 0.0
    try:
        if oracle_dtype is not None:
            for p in params:
                p.data = p.data.astype(oracle_dtype)
        with no_grad():
            for i, j in coords:
                buf = params[i].data.reshape(-1)
                keep = buf[j]
                def at(delta):
                    buf[j] = keep + delta
                    return float(f().data)

                if stencil == 3:
                    numeric = (at(h) - at(-h)) / (2.0 * h)
                else:
                    numeric = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h)
                buf[j] = keep
                a = float(analytic[i].reshape(-1)[j])
                err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
                worst = max(worst, err)
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
    return worst
