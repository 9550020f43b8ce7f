"""Shared fixtures and the acceptance-criteria summary printed after every run."""
from __future__ import annotations

import numpy as np
import pytest

from shiftleak.data import LabeledDataset, ShiftSpec, synth_blobs
from shiftleak.fl import DatasetConfig, ExperimentConfig, Seeds

# filled by tests/test_acceptance.py: (criterion number, passed, detail)
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def small_config(**kw) -> ExperimentConfig:
    """A fast federation on small synthetic blobs."""
    base = dict(r=8, s=5, d=200, n=2, m=1, l=1, e=3, val_size=120, probe_size=32,
                lr=1e-3, batch_size=32,
                dataset=DatasetConfig(num_classes=4, dim=6, samples_per_class=300),
                shift=ShiftSpec.even_odd(4, 0.8), seeds=Seeds(1, 2, 3))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def blobs():
    return synth_blobs(4, 100, 5, seed=7)


def dataset_from(x, y, c) -> LabeledDataset:
    return LabeledDataset(np.asarray(x, dtype=np.float64), np.asarray(y), c)
