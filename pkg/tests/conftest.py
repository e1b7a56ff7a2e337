import numpy as np
import pytest

from structprune import QaBatch, TransformerConfig, build_model

TINY = TransformerConfig(n_layers=2, n_heads=4, d_model=16, d_ff=24, vocab_size=20, max_seq_len=8)


@pytest.fixture
def tiny_model():
    return build_model(TINY, seed=0)


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(0)
    ids = rng.integers(0, TINY.vocab_size, size=(3, TINY.max_seq_len))
    starts = rng.integers(0, TINY.max_seq_len, size=3)
    ends = rng.integers(0, TINY.max_seq_len, size=3)
    return QaBatch(ids, starts, ends)


def random_batch(cfg, n, seed=0, seq_len=None):
    rng = np.random.default_rng(seed)
    seq_len = seq_len or cfg.max_seq_len
    ids = rng.integers(0, cfg.vocab_size, size=(n, seq_len))
    return QaBatch(ids, rng.integers(0, seq_len, size=n), rng.integers(0, seq_len, size=n))


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number, name, ok, detail):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(line)
        _CRITERIA[number] = line
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
