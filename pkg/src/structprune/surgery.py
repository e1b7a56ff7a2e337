"""Physically removing gated-off heads and feed-forward units."""

from __future__ import annotations

import logging
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .transformer import GateMask, Model, forward

logger = logging.getLogger(__name__)


def _check_binary(vecs, sizes, family):
    if len(vecs) != len(sizes):
        raise ContractError(f"{family} mask has {len(vecs)} layers, model has {len(sizes)}")
    out = []
    for l, (v, n) in enumerate(zip(vecs, sizes)):
        v = np.asarray(v.data if isinstance(v, Tensor) else v)
        if v.shape != (n,):
            raise ContractError(f"{family} mask layer {l}: shape {v.shape}, model has {n} units")
        if not np.all((v == 0) | (v == 1)):
            raise ContractError(f"{family} mask layer {l} is not binary")
        if not v.any():
            raise ContractError(f"{family} mask layer {l} removes every unit; apply the guard first")
        out.append(np.flatnonzero(v))
    return out


def _sliced(params, name, index, axis):
    p = params[name]
    params[name] = Tensor(np.take(p.data, index, axis=axis), requires_grad=p.requires_grad)


def _copied(model):
    params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad) for n, p in model.params.items()}
    return params


def prune_attention(model, mask_attn):
    """New model without the heads whose gate is 0 (surviving order kept)."""
    keep = _check_binary(mask_attn, model.heads_layer, "attn")
    dh = model.config.head_dim
    params = _copied(model)
    for l, heads in enumerate(keep):
        cols = (heads[:, None] * dh + np.arange(dh)[None, :]).reshape(-1)
        p = f"layers.{l}.attn."
        for w in ("wq", "wk", "wv"):
            _sliced(params, p + w, cols, axis=1)
        for b in ("bq", "bk", "bv"):
            _sliced(params, p + b, cols, axis=0)
        _sliced(params, p + "wo", cols, axis=0)
    return Model(model.config, params)


def prune_feedforward(model, mask_ff):
    """New model without the feed-forward units whose gate is 0."""
    keep = _check_binary(mask_ff, model.ff_layer, "ff")
    params = _copied(model)
    for l, units in enumerate(keep):
        p = f"layers.{l}.ff."
        _sliced(params, p + "w1", units, axis=1)
        _sliced(params, p + "b1", units, axis=0)
        _sliced(params, p + "w2", units, axis=0)
    return Model(model.config, params)


def prune(model, mask):
    """Attention first, then feed-forward; a ``None`` family is left alone."""
    out = model
    if mask.attn is not None:
        out = prune_attention(out, mask.attn)
    if mask.ff is not None:
        out = prune_feedforward(out, mask.ff)
    if out is model:
        out = model.copy()
    return out


def round_sizes(mask, granularity, scores):
    """Round each layer's retained count to the nearest multiple of ``granularity``.

    Halves round up, the result is at least one multiple and at most the
    layer width. Units are re-added highest score first and dropped lowest
    score first (ties: lower index re-added first, higher index dropped
    first).
    """
    if granularity < 1:
        raise ContractError(f"granularity must be >= 1, got {granularity}")
    out = GateMask(guard_events=list(mask.guard_events))
    for family in ("attn", "ff"):
        vecs = getattr(mask, family)
        if vecs is None:
            continue
        fam_scores = scores.get(family)
        new = []
        for l, v in enumerate(vecs):
            v = np.asarray(v, dtype=np.float32).copy()
            n, count = v.size, int(np.count_nonzero(v))
            target = granularity * max(1, int(math.floor(count / granularity + 0.5)))
            target = min(target, n)
            s = np.asarray(fam_scores[l], dtype=np.float64)
            idx = np.arange(n)
            if target > count:
                off = np.flatnonzero(v == 0)
                order = off[np.lexsort((idx[off], -s[off]))]
                v[order[: target - count]] = 1.0
            elif target < count:
                on = np.flatnonzero(v == 1)
                order = on[np.lexsort((-idx[on], s[on]))]
                v[order[: count - target]] = 0.0
            new.append(v)
        setattr(out, family, new)
    return out


def pruned_fraction(mask, family):
    vecs = getattr(mask, family)
    if vecs is None:
        return 0.0
    total = sum(len(v) for v in vecs)
    kept = sum(int(np.count_nonzero(v)) for v in vecs)
    return 1.0 - kept / total


def retention_table(original, pruned):
    """One record per layer: heads and ff units before and after pruning."""
    return [
        {"layer": l, "heads_before": hb, "heads_after": ha, "ff_before": fb, "ff_after": fa}
        for l, (hb, ha, fb, fa) in enumerate(
            zip(original.heads_layer, pruned.heads_layer, original.ff_layer, pruned.ff_layer)
        )
    ]


def verify_equivalence(original, mask, pruned, trials=10, seed=0, batch_size=4, seq_len=None):
    """Max abs logit difference between the gated original and the pruned model.

    Runs ``trials`` random token batches through both.
    """
    cfg = original.config
    for family, sizes in (("attn", pruned.heads_layer), ("ff", pruned.ff_layer)):
        counts = mask.popcounts(family)
        full = original.heads_layer if family == "attn" else original.ff_layer
        expected = full if counts is None else counts
        if list(expected) != list(sizes):
            raise ContractError(f"{family}: pruned sizes {sizes} do not match mask popcounts {expected}")
    pruned.check_consistency()
    seq_len = seq_len or cfg.max_seq_len
    rng = np.random.default_rng(seed)
    worst = 0.0
    with ad.no_grad():
        for _ in range(trials):
            ids = rng.integers(0, cfg.vocab_size, size=(batch_size, seq_len))
            a = forward(original, ids, mask).data
            b = forward(pruned, ids).data
            worst = max(worst, float(np.abs(a - b).max()))
    if worst > 1e-3:
        logger.warning("pruned model diverges from gated original: max abs diff %.3g", worst)
    return worst
