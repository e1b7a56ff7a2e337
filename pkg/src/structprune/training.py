"""Task training, continued training of pruned models, and distillation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DimensionError, NonFiniteError, TrainingDivergedError
from .optim import Adam
from .transformer import forward, qa_loss


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 24
    epochs: float = 1.0
    grad_accumulation_steps: int = 1
    seed: int = 0
    objective: str = "cross_entropy"
    distill_temperature: float = 2.0
    distill_alpha: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0", field="learning_rate")
        if not self.epochs >= 0:
            raise ConfigError("epochs must be >= 0", field="epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field="batch_size")
        if self.grad_accumulation_steps < 1:
            raise ConfigError("grad_accumulation_steps must be >= 1", field="grad_accumulation_steps")
        if self.objective not in ("cross_entropy", "distillation"):
            raise ConfigError(f"unknown objective {self.objective!r}", field="objective")
        if not 0.0 <= self.distill_alpha <= 1.0:
            raise ConfigError("distill_alpha must lie in [0, 1]", field="distill_alpha")
        if not self.distill_temperature > 0:
            raise ConfigError("distill_temperature must be positive", field="distill_temperature")

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)


class LossHistory:
    """Per-step objective values, writable as ``step,epoch,objective`` CSV."""

    def __init__(self):
        self.rows = []

    def append(self, step, epoch, value):
        self.rows.append((step, epoch, value))

    def epoch_means(self):
        by_epoch = {}
        for _, epoch, value in self.rows:
            by_epoch.setdefault(epoch, []).append(value)
        return [math.fsum(v) / len(v) for _, v in sorted(by_epoch.items())]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "objective"])
            for step, epoch, value in self.rows:
                w.writerow([step, epoch, f"{value:.6f}"])


def _kl_term(student, teacher, temperature):
    """T^2 * KL(teacher_T || student_T) over the last axis, mean over rows."""
    t = teacher.astype(np.float64) / temperature
    t = t - t.max(axis=-1, keepdims=True)
    logp_t = t - np.log(np.exp(t).sum(axis=-1, keepdims=True))
    p_t = np.exp(logp_t)
    rows = int(np.prod(student.shape[:-1]))
    dtype = student.data.dtype
    entropy_part = float((p_t * logp_t).sum()) / rows
    logq = (student * (1.0 / temperature)).log_softmax()
    cross = (logq * p_t.astype(dtype)).sum() * (-1.0 / rows)
    return (cross + entropy_part) * (temperature**2)


def distillation_loss(student_logits, teacher_logits, batch, temperature=2.0, alpha=0.9):
    """``alpha * T^2 * KL`` averaged over start/end plus ``(1 - alpha) * CE``.

    ``teacher_logits`` is a plain array (no gradient). With ``alpha == 0``
    this is exactly ``qa_loss``.
    """
    teacher_logits = np.asarray(getattr(teacher_logits, "data", teacher_logits))
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(
            f"student logits {student_logits.shape} vs teacher logits {teacher_logits.shape}"
        )
    if alpha == 0.0:
        return qa_loss(student_logits, batch)
    per_pos = student_logits.transpose(2, 0, 1)
    t_pos = teacher_logits.transpose(2, 0, 1)
    kl = (_kl_term(per_pos[0], t_pos[0], temperature) + _kl_term(per_pos[1], t_pos[1], temperature)) * 0.5
    if alpha == 1.0:
        return kl
    return kl * alpha + qa_loss(student_logits, batch) * (1.0 - alpha)


def _fit(model, data, config, teacher=None):
    model = model.copy().unfreeze()
    history = LossHistory()
    if config.epochs == 0 or len(data) == 0:
        return model, history
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(data) / config.batch_size)
    total = math.ceil(config.epochs * steps_per_epoch)
    accum = config.grad_accumulation_steps
    step = micro = 0
    epoch = 0
    while step < total:
        for batch in data.batches(config.batch_size, rng):
            if step >= total:
                break
            try:
                logits = forward(model, batch)
                if config.objective == "distillation":
                    with ad.no_grad():
                        t_logits = forward(teacher, batch).data
                    loss = distillation_loss(
                        logits, t_logits, batch, config.distill_temperature, config.distill_alpha
                    )
                else:
                    loss = qa_loss(logits, batch)
                (loss * (1.0 / accum) if accum > 1 else loss).backward()
                history.append(step, epoch, float(loss.data))
                micro += 1
                if micro == accum:
                    opt.step()
                    opt.zero_grad()
                    micro = 0
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"non-finite value at step {step} (epoch {epoch}): {exc}") from exc
            step += 1
        epoch += 1
    if micro:
        opt.step()
        opt.zero_grad()
    return model, history


def train_task(model, data, config=None):
    """Train every weight with cross-entropy; returns ``(new_model, history)``.

    The input model is not modified.
    """
    config = config or TrainConfig()
    if config.objective != "cross_entropy":
        raise ContractError("train_task uses the cross-entropy objective")
    return _fit(model, data, config)


def retrain(pruned, data, config=None):
    """Continued cross-entropy training of a (pruned) model."""
    return train_task(pruned, data, config or TrainConfig(epochs=1.0))


def distill(student, teacher, data, config=None):
    """Continued training of ``student`` toward ``teacher``'s span distributions."""
    config = config or TrainConfig(objective="distillation")
    if config.objective != "distillation":
        config = config.replace(objective="distillation")
    s, t = student.config, teacher.config
    if s.vocab_size != t.vocab_size or s.max_seq_len != t.max_seq_len:
        raise ContractError(
            f"teacher/student mismatch: vocab {t.vocab_size} vs {s.vocab_size}, "
            f"max_seq_len {t.max_seq_len} vs {s.max_seq_len}"
        )
    return _fit(student, data, config, teacher=teacher)
