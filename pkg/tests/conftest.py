import dataclasses

import numpy as np
import pytest

from albert_lab import model as M
from albert_lab.data import Batch
from albert_lab.tensor import IGNORE_INDEX

TINY = M.ModelConfig(num_layers=2, hidden_size=16, embedding_size=8, num_heads=2, vocab_size=37,
                     max_positions=16, dropout_p=0.0, objective="mlm_sop")


def tiny_config(**changes) -> M.ModelConfig:
    return dataclasses.replace(TINY, **changes)


def random_batch(b=2, s=12, vocab=37, seed=0, pad_tail=3) -> Batch:
    """Packed-looking batch: [CLS] first, a [SEP]-free body, trailing padding on the last row."""
    rng = np.random.default_rng(seed)
    ids = rng.integers(5, vocab, size=(b, s))
    ids[:, 0] = 2
    pad = np.ones((b, s), dtype=bool)
    if pad_tail:
        ids[-1, s - pad_tail:] = 0
        pad[-1, s - pad_tail:] = False
    seg = np.zeros((b, s), dtype=np.int64)
    seg[:, s // 2:] = 1
    seg[~pad] = 0
    targets = np.where(rng.random((b, s)) < 0.3, rng.integers(5, vocab, size=(b, s)), IGNORE_INDEX)
    targets[~pad] = IGNORE_INDEX
    targets[:, 0] = IGNORE_INDEX
    targets[0, 1] = 7
    labels = rng.integers(0, 2, size=b)
    return Batch(ids, seg, pad, targets, [], labels)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def batch():
    return random_batch()


# -- acceptance verdict lines ----------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
