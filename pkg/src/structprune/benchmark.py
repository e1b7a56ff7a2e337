"""Wall-clock latency of inference passes."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .transformer import forward


@dataclass
class LatencyResult:
    median: float
    spread: float
    times: list

    def to_dict(self):
        return {"median": self.median, "spread": self.spread, "times": list(self.times)}


def benchmark_latency(model, batch_size=1, seq_len=None, repeats=5, n_examples=None, tokens=None, seed=0):
    """Median and (max - min) seconds of a full pass over a dev-set-sized input.

    Pass ``tokens`` (an id matrix) to time real data, otherwise ``n_examples``
    random sequences of ``seq_len`` are drawn. One untimed warmup pass runs
    first; BLAS is pinned to a single thread.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    cfg = model.config
    if tokens is None:
        seq_len = seq_len or cfg.max_seq_len
        n_examples = n_examples or 64
        tokens = np.random.default_rng(seed).integers(0, cfg.vocab_size, size=(n_examples, seq_len))
    tokens = np.asarray(tokens)
    chunks = [tokens[i : i + batch_size] for i in range(0, len(tokens), batch_size)]

    def run():
        for chunk in chunks:
            forward(model, chunk)

    times = []
    with threadpool_limits(limits=1), ad.no_grad():
        run()
        for _ in range(repeats):
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)
    spread = max(times) - min(times) if len(times) > 1 else 0.0
    return LatencyResult(statistics.median(times), spread, times)
