"""Post-norm transformer encoder with gate masks and a start/end span head.

Attention gates multiply each head's context vectors before the output
projection; feed-forward gates multiply post-activation intermediate units
before ``W2``. A zero gate is therefore exactly equivalent to deleting the
matching weight slices, which is what ``surgery`` relies on.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 32
    d_ff: int = 64
    vocab_size: int = 64
    max_seq_len: int = 32
    activation: str = "gelu"
    init_std: float = 0.02
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}", field=name)
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}",
                field="d_model",
            )
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"activation must be relu or gelu, got {self.activation!r}", field="activation")
        if not self.init_std > 0:
            raise ConfigError("init_std must be positive", field="init_std")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


LAYER_PARAM_NAMES = (
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "attn_ln.gain", "attn_ln.bias",
    "ff.w1", "ff.b1", "ff.w2", "ff.b2",
    "ff_ln.gain", "ff_ln.bias",
)  # fmt: skip


class Model:
    """Weights of a gated encoder plus the config they were built from.

    Query/key/value projections are stored as ``[d_model, heads * head_dim]``
    with head ``h`` occupying columns ``h*head_dim:(h+1)*head_dim``; the
    output projection holds the matching rows. Per-layer head and
    feed-forward widths are read off the weight shapes, so they can differ
    between layers after pruning.
    """

    def __init__(self, config, params):
        self.config = config
        self.params = dict(params)

    def __getitem__(self, name):
        return self.params[name]

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def layer(self, index):
        prefix = f"layers.{index}."
        return {name: self.params[prefix + name] for name in LAYER_PARAM_NAMES}

    @property
    def heads_layer(self):
        dh = self.config.head_dim
        return [self.params[f"layers.{l}.attn.wq"].shape[1] // dh for l in range(self.config.n_layers)]

    @property
    def ff_layer(self):
        return [self.params[f"layers.{l}.ff.w1"].shape[1] for l in range(self.config.n_layers)]

    def copy(self):
        params = {}
        for name, p in self.params.items():
            params[name] = Tensor(p.data.copy(), requires_grad=p.requires_grad)
        return Model(self.config, params)

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self):
        for p in self.params.values():
            p.requires_grad = True
        return self

    @property
    def is_frozen(self):
        return not any(p.requires_grad for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def check_consistency(self):
        """Raise ContractError if any weight disagrees with the per-layer sizes."""
        cfg = self.config
        E, dh = cfg.d_model, cfg.head_dim
        expect = {
            "embeddings.token": (cfg.vocab_size, E),
            "embeddings.position": (cfg.max_seq_len, E),
            "embeddings.ln.gain": (E,),
            "embeddings.ln.bias": (E,),
            "qa.weight": (E, 2),
            "qa.bias": (2,),
        }
        for l, (h, f) in enumerate(zip(self.heads_layer, self.ff_layer)):
            w = h * dh
            p = f"layers.{l}."
            expect.update({
                p + "attn.wq": (E, w), p + "attn.bq": (w,),
                p + "attn.wk": (E, w), p + "attn.bk": (w,),
                p + "attn.wv": (E, w), p + "attn.bv": (w,),
                p + "attn.wo": (w, E), p + "attn.bo": (E,),
                p + "attn_ln.gain": (E,), p + "attn_ln.bias": (E,),
                p + "ff.w1": (E, f), p + "ff.b1": (f,),
                p + "ff.w2": (f, E), p + "ff.b2": (E,),
                p + "ff_ln.gain": (E,), p + "ff_ln.bias": (E,),
            })  # fmt: skip
        if set(expect) != set(self.params):
            missing = sorted(set(expect) - set(self.params))
            extra = sorted(set(self.params) - set(expect))
            raise ContractError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, shape in expect.items():
            if self.params[name].shape != shape:
                raise ContractError(f"{name}: shape {self.params[name].shape}, expected {shape}")


def build_model(config, seed=0):
    """Fresh model with N(0, init_std) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    E, F = config.d_model, config.d_ff

    def normal(*shape):
        return Tensor((rng.standard_normal(shape) * config.init_std).astype(np.float32), requires_grad=True)

    def const(n, value):
        return Tensor(np.full(n, value, dtype=np.float32), requires_grad=True)

    params = {
        "embeddings.token": normal(config.vocab_size, E),
        "embeddings.position": normal(config.max_seq_len, E),
        "embeddings.ln.gain": const(E, 1.0),
        "embeddings.ln.bias": const(E, 0.0),
    }
    for l in range(config.n_layers):
        p = f"layers.{l}."
        params.update({
            p + "attn.wq": normal(E, E), p + "attn.bq": const(E, 0.0),
            p + "attn.wk": normal(E, E), p + "attn.bk": const(E, 0.0),
            p + "attn.wv": normal(E, E), p + "attn.bv": const(E, 0.0),
            p + "attn.wo": normal(E, E), p + "attn.bo": const(E, 0.0),
            p + "attn_ln.gain": const(E, 1.0), p + "attn_ln.bias": const(E, 0.0),
            p + "ff.w1": normal(E, F), p + "ff.b1": const(F, 0.0),
            p + "ff.w2": normal(F, E), p + "ff.b2": const(E, 0.0),
            p + "ff_ln.gain": const(E, 1.0), p + "ff_ln.bias": const(E, 0.0),
        })  # fmt: skip
    params["qa.weight"] = normal(E, 2)
    params["qa.bias"] = const(2, 0.0)
    return Model(config, params)


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass
class QaBatch:
    """Token ids ``[n, seq]`` with start/end target positions ``[n]``."""

    token_ids: np.ndarray
    start_targets: np.ndarray
    end_targets: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.start_targets = np.asarray(self.start_targets, dtype=np.int64)
        self.end_targets = np.asarray(self.end_targets, dtype=np.int64)
        if self.token_ids.ndim != 2:
            raise DimensionError(f"token_ids must be 2-D, got shape {self.token_ids.shape}")
        n, seq = self.token_ids.shape
        if self.start_targets.shape != (n,) or self.end_targets.shape != (n,):
            raise DimensionError("start/end targets must have one entry per row")
        if n and (self.start_targets.max() >= seq or self.end_targets.max() >= seq):
            raise ContractError("targets must be < sequence length")
        if n and (self.start_targets.min() < 0 or self.end_targets.min() < 0):
            raise ContractError("targets must be >= 0")

    def __len__(self):
        return self.token_ids.shape[0]

    @property
    def seq_len(self):
        return self.token_ids.shape[1]

    def subset(self, index):
        return QaBatch(self.token_ids[index], self.start_targets[index], self.end_targets[index])

    def concat(self, other):
        return QaBatch(
            np.concatenate([self.token_ids, other.token_ids]),
            np.concatenate([self.start_targets, other.start_targets]),
            np.concatenate([self.end_targets, other.end_targets]),
        )

    def batches(self, batch_size, rng=None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(self), batch_size):
            yield self.subset(order[i : i + batch_size])


# ---------------------------------------------------------------------------
# gate masks
# ---------------------------------------------------------------------------


@dataclass
class GateMask:
    """Per-layer gate vectors for attention heads and feed-forward units.

    Entries are numpy arrays (finalized or fixed soft values) or Tensors
    (trainable / reparameterized gates). Either family may be ``None``,
    meaning that family is not gated. ``guard_events`` lists
    ``(family, layer)`` pairs where the at-least-one-unit guard fired.
    """

    attn: list | None = None
    ff: list | None = None
    guard_events: list = field(default_factory=list)

    @classmethod
    def ones(cls, model):
        return cls(
            attn=[np.ones(h, dtype=np.float32) for h in model.heads_layer],
            ff=[np.ones(f, dtype=np.float32) for f in model.ff_layer],
        )

    def _values(self, family):
        vecs = getattr(self, family)
        if vecs is None:
            return None
        return [v.data if isinstance(v, Tensor) else np.asarray(v) for v in vecs]

    def is_binary(self):
        for family in ("attn", "ff"):
            vals = self._values(family)
            if vals is None:
                continue
            for v in vals:
                if not np.all((v == 0) | (v == 1)):
                    return False
        return True

    def popcounts(self, family):
        vals = self._values(family)
        return None if vals is None else [int(np.count_nonzero(v)) for v in vals]

    def as_arrays(self):
        """Copy with every entry converted to a float32 numpy array."""
        conv = lambda vs: None if vs is None else [np.asarray(v, dtype=np.float32).copy() for v in vs]  # noqa: E731
        return GateMask(conv(self._values("attn")), conv(self._values("ff")), list(self.guard_events))

    def check_against(self, model):
        for family, sizes in (("attn", model.heads_layer), ("ff", model.ff_layer)):
            vals = self._values(family)
            if vals is None:
                continue
            if len(vals) != len(sizes):
                raise DimensionError(f"{family} mask has {len(vals)} layers, model has {len(sizes)}")
            for l, (v, n) in enumerate(zip(vals, sizes)):
                if v.shape != (n,):
                    raise DimensionError(f"{family} mask for layer {l} has shape {v.shape}, model expects ({n},)")


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _gate_tensor(gate, dtype):
    if gate is None or isinstance(gate, Tensor):
        return gate
    return Tensor(np.asarray(gate, dtype=dtype))


def attention(layer, x, gate, head_dim):
    """Multi-head self-attention sublayer output (before residual)."""
    B, S, _ = x.shape
    H = layer["attn.wq"].shape[1] // head_dim
    scale = 1.0 / math.sqrt(head_dim)
    q = (x @ layer["attn.wq"] + layer["attn.bq"]).reshape(B, S, H, head_dim).transpose(0, 2, 1, 3)
    k = (x @ layer["attn.wk"] + layer["attn.bk"]).reshape(B, S, H, head_dim).transpose(0, 2, 3, 1)
    v = (x @ layer["attn.wv"] + layer["attn.bv"]).reshape(B, S, H, head_dim).transpose(0, 2, 1, 3)
    probs = ad.softmax_last_axis((q * scale) @ k)
    ctx = probs @ v
    if gate is not None:
        ctx = ctx * gate.reshape(H, 1, 1)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, S, H * head_dim)
    return ctx @ layer["attn.wo"] + layer["attn.bo"]


def feed_forward(layer, x, gate, activation):
    """Feed-forward sublayer output (before residual)."""
    h = x @ layer["ff.w1"] + layer["ff.b1"]
    h = h.gelu() if activation == "gelu" else h.relu()
    if gate is not None:
        h = h * gate
    return h @ layer["ff.w2"] + layer["ff.b2"]


def forward(model, batch, mask=None):
    """Start/end logits ``[batch, seq, 2]`` for a QaBatch or raw id matrix."""
    cfg = model.config
    ids = batch.token_ids if isinstance(batch, QaBatch) else np.asarray(batch)
    if ids.ndim != 2:
        raise DimensionError(f"token ids must be [batch, seq], got shape {ids.shape}")
    S = ids.shape[1]
    if S > cfg.max_seq_len:
        raise DimensionError(f"sequence length {S} exceeds max_seq_len {cfg.max_seq_len}")
    if mask is not None:
        mask.check_against(model)
    p = model.params
    dtype = p["embeddings.token"].data.dtype
    eps = cfg.layer_norm_eps

    x = ad.embedding(p["embeddings.token"], ids) + p["embeddings.position"][:S]
    x = ad.layer_norm(x, p["embeddings.ln.gain"], p["embeddings.ln.bias"], eps)
    for l in range(cfg.n_layers):
        layer = model.layer(l)
        attn_gate = _gate_tensor(mask.attn[l], dtype) if mask is not None and mask.attn is not None else None
        ff_gate = _gate_tensor(mask.ff[l], dtype) if mask is not None and mask.ff is not None else None
        a = attention(layer, x, attn_gate, cfg.head_dim)
        x = ad.layer_norm(x + a, layer["attn_ln.gain"], layer["attn_ln.bias"], eps)
        f = feed_forward(layer, x, ff_gate, cfg.activation)
        x = ad.layer_norm(x + f, layer["ff_ln.gain"], layer["ff_ln.bias"], eps)
    return x @ p["qa.weight"] + p["qa.bias"]


def qa_loss(logits, batch):
    """Mean over the batch of (start CE + end CE) / 2."""
    B, S, two = logits.shape
    if two != 2 or B != len(batch):
        raise DimensionError(f"logits shape {logits.shape} does not match batch of {len(batch)}")
    per_pos = logits.transpose(2, 0, 1)
    start = ad.cross_entropy(per_pos[0], batch.start_targets)
    end = ad.cross_entropy(per_pos[1], batch.end_targets)
    return (start + end) * 0.5


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------


def count_params(model):
    return int(sum(p.size for p in model.parameters()))


def flop_breakdown(model, seq_len, batch=1):
    """Per-layer FLOPs (multiply and add counted separately).

    attention = 4 projections of 2*B*S*E*(H_l*dh) each, plus score and
    context products of 2*B*H_l*S*S*dh each; feed_forward =
    2 * B * S * E * F_l * 2 (W1 and W2). Embeddings, layer norms,
    softmax and the span head are not counted.
    """
    E, dh = model.config.d_model, model.config.head_dim
    B, S = batch, seq_len
    rows = []
    for h, f in zip(model.heads_layer, model.ff_layer):
        width = h * dh
        attn = 4 * 2 * B * S * E * width + 2 * (2 * B * h * S * S * dh)
        ff = 2 * B * S * E * f * 2
        rows.append({"attention": attn, "feed_forward": ff})
    return rows


def count_flops(model, seq_len, batch=1):
    return int(sum(r["attention"] + r["feed_forward"] for r in flop_breakdown(model, seq_len, batch)))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _per_example_loss(logits, batch):
    rows = np.arange(len(batch))
    out = []
    for k, targets in ((0, batch.start_targets), (1, batch.end_targets)):
        z = logits[:, :, k].astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        out.append(-logp[rows, targets])
    return 0.5 * (out[0] + out[1])


def evaluate(model, dataset, mask=None, batch_size=64):
    """Span exact match, start/end accuracy and mean loss over ``dataset``."""
    n = len(dataset)
    if n == 0:
        raise ContractError("evaluate needs a non-empty dataset")
    start_hits = end_hits = both = 0
    losses = []
    with ad.no_grad():
        for batch in dataset.batches(batch_size):
            logits = forward(model, batch, mask).data
            ps = logits[:, :, 0].argmax(axis=1)
            pe = logits[:, :, 1].argmax(axis=1)
            s_ok = ps == batch.start_targets
            e_ok = pe == batch.end_targets
            start_hits += int(s_ok.sum())
            end_hits += int(e_ok.sum())
            both += int((s_ok & e_ok).sum())
            losses.extend(_per_example_loss(logits, batch).tolist())
    return {
        "span_exact_match": both / n,
        "start_acc": start_hits / n,
        "end_acc": end_hits / n,
        "mean_loss": math.fsum(losses) / n,
    }
