import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


def random_track_pair(rng, n):
    """Ground truth and a noisy prediction, (n, 4) each, with positive sizes."""
    gt = np.column_stack([rng.uniform(0, 300, n), rng.uniform(0, 200, n), rng.uniform(3, 40, n), rng.uniform(3, 40, n)])
    noise = rng.normal(0, 1, (n, 4)) * np.array([6, 6, 3, 3])
    pred = gt + noise
    pred[:, 2:] = np.maximum(pred[:, 2:], 0.5)
    return np.round(pred, 2), np.round(gt, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment (minutes)")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, line = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {line}")
