"""Choosing gate values: Bernoulli random, gradient gain, and L0 hard-concrete.

All methods end in a binary ``GateMask``. Every finalized mask passes through
``enforce_min_units`` so each sublayer keeps at least one head and one
feed-forward unit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .optim import Adam
from .transformer import GateMask, forward, qa_loss

logger = logging.getLogger(__name__)

FAMILIES = ("attn", "ff")


@dataclass
class ImportanceScores:
    """Per-layer non-negative scores for heads (``attn``) and ff units (``ff``)."""

    attn: list | None = None
    ff: list | None = None

    def get(self, family):
        return getattr(self, family)


def model_shape(model_or_shape):
    """``(heads_layer, ff_layer)`` from a Model or an already-extracted pair."""
    if isinstance(model_or_shape, tuple):
        return model_or_shape
    return list(model_or_shape.heads_layer), list(model_or_shape.ff_layer)


def enforce_min_units(mask, scores=None):
    """Force-retain the best-scoring unit in any layer left with none active.

    Ties (and the no-score case) resolve to the lowest unit index. Records
    each intervention in ``mask.guard_events`` and logs a warning.
    """
    for family in FAMILIES:
        vecs = getattr(mask, family)
        if vecs is None:
            continue
        fam_scores = None if scores is None else scores.get(family)
        for l, v in enumerate(vecs):
            if np.count_nonzero(v) == 0:
                keep = 0 if fam_scores is None else int(np.argmax(fam_scores[l]))
                v[keep] = 1.0
                mask.guard_events.append((family, l))
                logger.warning("%s layer %d had no active units; force-retained unit %d", family, l, keep)
    return mask


# ---------------------------------------------------------------------------
# (1) random
# ---------------------------------------------------------------------------


def random_gates(model_or_shape, p, seed=0, families=FAMILIES):
    """Each gate independently 1 with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"bernoulli p must lie in [0, 1], got {p}", field="bernoulli_p")
    heads, ffs = model_shape(model_or_shape)
    rng = np.random.default_rng(seed)
    draws = {"attn": [rng.random(h) for h in heads], "ff": [rng.random(f) for f in ffs]}
    mask = GateMask()
    for family in families:
        setattr(mask, family, [(u < p).astype(np.float32) for u in draws[family]])
    # lower draw = "more likely kept"; that is the guard's preference order
    scores = ImportanceScores(
        attn=[1.0 - u for u in draws["attn"]], ff=[1.0 - u for u in draws["ff"]]
    )
    return enforce_min_units(mask, scores)


def random_scores(model_or_shape, seed=0):
    """Uniform random scores; thresholding them keeps a random subset of exact size."""
    heads, ffs = model_shape(model_or_shape)
    rng = np.random.default_rng(seed)
    return ImportanceScores(attn=[rng.random(h) for h in heads], ff=[rng.random(f) for f in ffs])


# ---------------------------------------------------------------------------
# (2) gain
# ---------------------------------------------------------------------------


def gain_scores(model, data, max_batches=None, batch_size=24, objective=None):
    """Mean over minibatches of ``|dL/d gate|`` with every gate held at 1.

    ``objective(logits, batch)`` defaults to the span cross-entropy. Model
    weights are neither updated nor left with gradients.
    """
    if len(data) == 0:
        raise ContractError("gain_scores needs a non-empty dataset")
    objective = objective or qa_loss
    was_frozen = {name: p.requires_grad for name, p in model.named_parameters()}
    model.freeze()
    gates = {
        "attn": [Tensor(np.ones(h, dtype=np.float32), requires_grad=True) for h in model.heads_layer],
        "ff": [Tensor(np.ones(f, dtype=np.float32), requires_grad=True) for f in model.ff_layer],
    }
    mask = GateMask(attn=gates["attn"], ff=gates["ff"])
    totals = {fam: [np.zeros(g.shape, dtype=np.float64) for g in gates[fam]] for fam in FAMILIES}
    n_batches = 0
    try:
        for batch in data.batches(batch_size):
            if max_batches is not None and n_batches >= max_batches:
                break
            for fam in FAMILIES:
                for g in gates[fam]:
                    g.zero_grad()
            loss = objective(forward(model, batch, mask), batch)
            loss.backward()
            for fam in FAMILIES:
                for acc, g in zip(totals[fam], gates[fam]):
                    acc += np.abs(g.grad)
            n_batches += 1
    finally:
        for name, p in model.named_parameters():
            p.requires_grad = was_frozen[name]
    return ImportanceScores(
        attn=[t / n_batches for t in totals["attn"]], ff=[t / n_batches for t in totals["ff"]]
    )


def threshold_scores(scores, keep_fraction, families=FAMILIES):
    """Globally keep the top ``keep_fraction`` of each gate family by score.

    The count kept is ``floor(keep_fraction * n + 0.5)``, at least one.
    Ties go to the earlier (layer, unit) position.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must lie in (0, 1], got {keep_fraction}", field="keep_fraction")
    mask = GateMask()
    for family in families:
        per_layer = scores.get(family)
        if per_layer is None:
            continue
        flat = np.concatenate([np.asarray(s, dtype=np.float64) for s in per_layer])
        n = flat.size
        k = max(1, min(n, int(math.floor(keep_fraction * n + 0.5))))
        # lexsort: last key is primary; stable on position for equal scores
        order = np.lexsort((np.arange(n), -flat))
        keep = np.zeros(n, dtype=np.float32)
        keep[order[:k]] = 1.0
        out, start = [], 0
        for s in per_layer:
            out.append(keep[start : start + len(s)].copy())
            start += len(s)
        setattr(mask, family, out)
    return enforce_min_units(mask, scores)


# ---------------------------------------------------------------------------
# (4) L0 / hard-concrete
# ---------------------------------------------------------------------------


@dataclass
class HardConcreteGates:
    """Trainable ``log_alpha`` per gate, one Tensor per layer.

    ``penalty`` selects what the L0 term counts: ``"one"`` uses P(gate == 1),
    ``"nonzero"`` the more common P(gate != 0).
    """

    log_alpha: list
    beta: float = 2.0 / 3.0
    gamma_low: float = -0.1
    zeta: float = 1.1
    penalty: str = "one"
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("beta must be positive", field="beta")
        if not (self.gamma_low < 0 and self.zeta > 1):
            raise ConfigError(
                f"stretch limits need gamma_low < 0 < 1 < zeta, got ({self.gamma_low}, {self.zeta})",
                field="gamma_low",
            )
        if self.penalty not in ("one", "nonzero"):
            raise ConfigError(f"penalty must be 'one' or 'nonzero', got {self.penalty!r}", field="penalty")
        self.log_alpha = [
            la if isinstance(la, Tensor) else Tensor(np.asarray(la, dtype=np.float32), requires_grad=True)
            for la in self.log_alpha
        ]

    @classmethod
    def init(cls, sizes, value=2.0, **kwargs):
        return cls([Tensor(np.full(n, value, dtype=np.float32), requires_grad=True) for n in sizes], **kwargs)

    def parameters(self):
        return list(self.log_alpha)

    def values(self):
        return [la.data.copy() for la in self.log_alpha]


def _logit(p):
    return math.log(p) - math.log1p(-p)


def sample_hard_concrete(gates, rng):
    """Reparameterized gate draws, one Tensor per layer, values in [0, 1]."""
    out = []
    span = gates.zeta - gates.gamma_low
    for la in gates.log_alpha:
        u = rng.random(la.shape)
        u = np.clip(u, 1e-6, 1.0 - 1e-6)
        noise = (np.log(u) - np.log1p(-u)).astype(la.data.dtype)
        s = ((la + noise) * (1.0 / gates.beta)).sigmoid()
        out.append((s * span + gates.gamma_low).clamp(0.0, 1.0))
    return out


def hard_concrete_samples(log_alpha, beta, gamma_low, zeta, u):
    """Plain-numpy gate values for uniform draws ``u`` (no autodiff)."""
    s = 1.0 / (1.0 + np.exp(-(np.log(u) - np.log1p(-u) + log_alpha) / beta))
    return np.clip(s * (zeta - gamma_low) + gamma_low, 0.0, 1.0)


def _penalty_offset(gates):
    span = gates.zeta - gates.gamma_low
    if gates.penalty == "one":
        return gates.beta * _logit((1.0 - gates.gamma_low) / span)
    return gates.beta * _logit(-gates.gamma_low / span)


def prob_gate_one(gates):
    """Closed-form P(gate == 1) per layer as differentiable Tensors.

    The stretched value reaches 1 iff ``sigmoid((L + log_alpha)/beta) >= c1``
    with logistic noise ``L`` and ``c1 = (1 - gamma_low)/(zeta - gamma_low)``,
    giving ``sigmoid(log_alpha - beta * logit(c1))``.
    """
    offset = gates.beta * _logit((1.0 - gates.gamma_low) / (gates.zeta - gates.gamma_low))
    return [(la - offset).sigmoid() for la in gates.log_alpha]


def expected_active(gates):
    """Per-layer probability that each gate counts toward the penalty."""
    offset = _penalty_offset(gates)
    return [(la - offset).sigmoid() for la in gates.log_alpha]


@dataclass
class PenaltyWeights:
    lambda_attn: float = 0.0
    lambda_ff: float = 0.0

    def __post_init__(self):
        if self.lambda_attn < 0 or self.lambda_ff < 0:
            raise ConfigError("penalty weights must be non-negative", field="lambda_attn")


def penalized_objective(task_loss, gates_attn, gates_ff, weights):
    """``task_loss + lambda_attn * E[#active attn] + lambda_ff * E[#active ff]``."""
    total = task_loss
    for gates, lam in ((gates_attn, weights.lambda_attn), (gates_ff, weights.lambda_ff)):
        if gates is None or lam == 0:
            continue
        count = None
        for p in expected_active(gates):
            s = p.sum()
            count = s if count is None else count + s
        total = total + count * lam
    return total


def test_time_values(gates):
    """Deterministic gate estimate per layer (numpy)."""
    span = gates.zeta - gates.gamma_low
    out = []
    for la in gates.log_alpha:
        z = 1.0 / (1.0 + np.exp(-la.data.astype(np.float64) / gates.beta))
        out.append(np.clip(z * span + gates.gamma_low, 0.0, 1.0))
    return out


def finalize_gates(gates, threshold=0.5, family="attn"):
    """Binary mask for one family: keep a gate iff its test-time value >= ``threshold``.

    The test-time value is ``clamp(sigmoid(log_alpha/beta)*(zeta-gamma_low)+gamma_low, 0, 1)``.
    """
    values = test_time_values(gates)
    mask = GateMask(**{family: [(z >= threshold).astype(np.float32) for z in values]})
    return enforce_min_units(mask, ImportanceScores(**{family: [la.data for la in gates.log_alpha]}))


@dataclass
class GateTrainConfig:
    learning_rate: float = 1e-1
    batch_size: int = 24
    epochs: float = 1.0
    seed: int = 0
    init_log_alpha: float = 2.0
    beta: float = 2.0 / 3.0
    gamma_low: float = -0.1
    zeta: float = 1.1
    penalty: str = "one"
    objective: str = "cross_entropy"
    distill_temperature: float = 2.0
    distill_alpha: float = 0.9
    data_fraction: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive", field="learning_rate")
        if not 0 < self.epochs <= 1.0:
            raise ConfigError("gate training runs for at most one epoch", field="epochs")
        if self.objective not in ("cross_entropy", "distillation"):
            raise ConfigError(f"unknown gate objective {self.objective!r}", field="objective")
        if not 0 < self.data_fraction <= 1.0:
            raise ConfigError("data_fraction must lie in (0, 1]", field="data_fraction")


def _train_family(model, data, family, lam, config, teacher):
    from .training import distillation_loss

    sizes = model.heads_layer if family == "attn" else model.ff_layer
    gates = HardConcreteGates.init(
        sizes, config.init_log_alpha, beta=config.beta, gamma_low=config.gamma_low,
        zeta=config.zeta, penalty=config.penalty,
    )  # fmt: skip
    # separate streams per family so attn and ff runs stay independent
    rng = np.random.default_rng([config.seed, FAMILIES.index(family)])
    opt = Adam(gates.parameters(), lr=config.learning_rate)
    weights = PenaltyWeights(**{f"lambda_{family}": lam})
    if config.data_fraction < 1.0:
        n = max(1, int(round(config.data_fraction * len(data))))
        data = data.subset(np.sort(rng.permutation(len(data))[:n]))
    steps_per_epoch = math.ceil(len(data) / config.batch_size)
    total_steps = max(1, math.ceil(config.epochs * steps_per_epoch))
    step = 0
    for batch in data.batches(config.batch_size, rng):
        if step >= total_steps:
            break
        opt.zero_grad()
        sampled = sample_hard_concrete(gates, rng)
        mask = GateMask(**{family: sampled})
        logits = forward(model, batch, mask)
        if config.objective == "distillation":
            with ad.no_grad():
                teacher_logits = forward(teacher, batch).data
            task = distillation_loss(
                logits, teacher_logits, batch, config.distill_temperature, config.distill_alpha
            )
        else:
            task = qa_loss(logits, batch)
        loss = penalized_objective(
            task, gates if family == "attn" else None, gates if family == "ff" else None, weights
        )
        loss.backward()
        opt.step()
        gates.history.append((step, float(loss.data)))
        step += 1
    return gates


def train_gates_l0(model, data, weights, config=None, teacher=None, families=FAMILIES):
    """Train hard-concrete gate parameters against a frozen model.

    Attention and feed-forward gates are optimized in two separate runs, each
    with the other family ungated. Returns ``(attn_gates, ff_gates)``; a
    family not listed in ``families`` comes back as ``None``.
    """
    config = config or GateTrainConfig()
    if not model.is_frozen:
        raise ContractError("train_gates_l0 needs a frozen model; call model.freeze() first")
    if len(data) == 0:
        raise ContractError("train_gates_l0 needs a non-empty dataset")
    if config.objective == "distillation":
        if teacher is None:
            raise ContractError("distillation-driven gate training needs a teacher model")
    else:
        teacher = None
    result = {}
    for family in FAMILIES:
        if family not in families:
            result[family] = None
            continue
        lam = weights.lambda_attn if family == "attn" else weights.lambda_ff
        result[family] = _train_family(model, data, family, lam, config, teacher)
    return result["attn"], result["ff"]


def finalize_mask(gates_attn, gates_ff, threshold=0.5):
    """Combine independently trained gate sets into one binary GateMask."""
    mask = GateMask()
    for family, gates in (("attn", gates_attn), ("ff", gates_ff)):
        if gates is None:
            continue
        part = finalize_gates(gates, threshold, family)
        setattr(mask, family, getattr(part, family))
        mask.guard_events.extend(part.guard_events)
    return mask


def l0_scores(gates_attn, gates_ff):
    """``sigmoid(log_alpha / beta)`` per gate: a non-negative, order-preserving score."""

    def conv(gates):
        if gates is None:
            return None
        return [1.0 / (1.0 + np.exp(-la.data.astype(np.float64) / gates.beta)) for la in gates.log_alpha]

    return ImportanceScores(attn=conv(gates_attn), ff=conv(gates_ff))
