"""Synthetic key-lookup span task and JSON-lines dataset files.

Layout of one example (length ``seq_len``)::

    [CLS] key [SEP] p_0 p_1 ... p_{seq_len-4}

The passage holds the question's key once (plus distractor keys). The answer
span starts right after the key and is ``1 + (key - 3) % max_span`` tokens
long, so finding it needs attention from the passage back to the question.
"No-answer" examples omit the key from the passage and point both targets at
position 0 (the CLS slot).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .transformer import QaBatch

CLS, SEP = 1, 2
PASSAGE_OFFSET = 3


@dataclass(frozen=True)
class SyntheticTaskConfig:
    vocab_size: int = 64
    seq_len: int = 32
    n_train: int = 2000
    n_dev: int = 500
    n_keys: int = 8
    n_distractors: int = 1
    max_span: int = 3
    no_answer_rate: float = 0.0
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.seq_len < 4:
            raise ConfigError("seq_len must be >= 4", field="seq_len")
        if self.n_train < 1 or self.n_dev < 1:
            raise ConfigError("n_train and n_dev must be >= 1", field="n_train")
        if self.n_keys < 1 + self.n_distractors:
            raise ConfigError("n_keys must exceed n_distractors", field="n_keys")
        if self.vocab_size < PASSAGE_OFFSET + self.n_keys + 1:
            raise ConfigError("vocab_size too small for the key vocabulary plus filler", field="vocab_size")
        if self.max_span < 1:
            raise ConfigError("max_span must be >= 1", field="max_span")
        passage = self.seq_len - PASSAGE_OFFSET
        if passage < 1 + self.max_span + self.n_distractors:
            raise ConfigError(
                f"passage of {passage} tokens cannot fit a key, a {self.max_span}-token span "
                f"and {self.n_distractors} distractors",
                field="seq_len",
            )
        for name in ("no_answer_rate", "noise_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]", field=name)

    def to_dict(self):
        return asdict(self)


def _key_tokens(cfg):
    return np.arange(PASSAGE_OFFSET, PASSAGE_OFFSET + cfg.n_keys)


def span_length(cfg, key):
    return 1 + (int(key) - PASSAGE_OFFSET) % cfg.max_span


def _generate(cfg, n, rng):
    keys = _key_tokens(cfg)
    filler = np.arange(PASSAGE_OFFSET + cfg.n_keys, cfg.vocab_size)
    P = cfg.seq_len - PASSAGE_OFFSET
    tokens = np.empty((n, cfg.seq_len), dtype=np.int64)
    starts = np.zeros(n, dtype=np.int64)
    ends = np.zeros(n, dtype=np.int64)
    for i in range(n):
        chosen = rng.choice(keys, size=1 + cfg.n_distractors, replace=False)
        key = chosen[0]
        passage = rng.choice(filler, size=P)
        no_answer = rng.random() < cfg.no_answer_rate
        length = span_length(cfg, key)
        taken = np.zeros(P, dtype=bool)
        if not no_answer:
            pos = int(rng.integers(0, P - length))
            passage[pos] = key
            taken[pos : pos + length + 1] = True
        free = np.flatnonzero(~taken)
        spots = rng.choice(free, size=cfg.n_distractors, replace=False)
        passage[spots] = chosen[1:]
        tokens[i, 0], tokens[i, 1], tokens[i, 2] = CLS, key, SEP
        tokens[i, PASSAGE_OFFSET:] = passage
        if not no_answer:
            starts[i] = PASSAGE_OFFSET + pos + 1
            ends[i] = PASSAGE_OFFSET + pos + length
        if cfg.noise_rate and rng.random() < cfg.noise_rate:
            s = int(rng.integers(PASSAGE_OFFSET, cfg.seq_len))
            starts[i] = s
            ends[i] = int(rng.integers(s, cfg.seq_len))
    return QaBatch(tokens, starts, ends)


def generate_synthetic_task(cfg):
    """Deterministic ``(train, dev)`` pair for ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    train = _generate(cfg, cfg.n_train, rng)
    dev = _generate(cfg, cfg.n_dev, rng)
    return train, dev


def split(data, fraction=0.9, seed=0):
    """Seeded random split; both parts keep their original relative order."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    k = int(round(fraction * len(data)))
    return data.subset(np.sort(order[:k])), data.subset(np.sort(order[k:]))


def save_jsonl(data, path):
    with open(path, "w") as fh:
        for toks, s, e in zip(data.token_ids, data.start_targets, data.end_targets):
            fh.write(json.dumps({"tokens": toks.tolist(), "start": int(s), "end": int(e)}) + "\n")


def load_jsonl(path):
    tokens, starts, ends = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                tokens.append(row["tokens"])
                starts.append(row["start"])
                ends.append(row["end"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad example ({exc})") from exc
    lengths = {len(t) for t in tokens}
    if len(lengths) > 1:
        raise ValueError(f"{path}: examples have differing lengths {sorted(lengths)}")
    return QaBatch(np.array(tokens, dtype=np.int64).reshape(len(tokens), -1), starts, ends)


def write_task(train, dev, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_jsonl(train, out / "train.jsonl")
    save_jsonl(dev, out / "dev.jsonl")
    return out / "train.jsonl", out / "dev.jsonl"
