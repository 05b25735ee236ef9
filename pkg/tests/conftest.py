import numpy as np
import pytest
import torch

from regenrec.corpus import Dataset, Sequence

torch.set_num_threads(1)


@pytest.fixture
def fig2_corpus():
    return Dataset((Sequence(0, (1, 2, 3, 4, 5)), Sequence(1, (1, 2, 3))), num_items=5, name="fig2")


def make_dataset(rows, num_items=None):
    seqs = tuple(Sequence(u, tuple(items)) for u, items in enumerate(rows))
    return Dataset(seqs, num_items or max(max(r) for r in rows))


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
