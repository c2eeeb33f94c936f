"""Shared fixtures and helpers for the test suite."""

import re

import numpy as np
import pytest
import torch

from dynfuse.batching import collate
from dynfuse.data_model import (
    BeamSnrFrame,
    Coordinate,
    CsiEmbedding,
    MeasurementWindow,
    normalize_window_times,
)

torch.set_default_dtype(torch.float64)


def make_toy_window(m_b=3, m_c=2, n_beam=2, n_csi=3, n_label=2, seed=0, span=5.0,
                    start=0.0, window_id=0):
    """A small normalized window with strictly increasing per-stream times."""
    rng = np.random.default_rng(seed)

    def times(n):
        return start + span * np.sort(rng.uniform(0.02, 0.98, size=n))

    w = MeasurementWindow(
        beam=tuple(BeamSnrFrame(t, rng.normal(size=m_b)) for t in times(n_beam)),
        csi=tuple(CsiEmbedding(t, rng.normal(size=m_c)) for t in times(n_csi)),
        labels=tuple(Coordinate(t, rng.normal(size=2)) for t in times(n_label)),
        window_span=span,
        t_start=start,
        window_id=window_id,
    )
    return normalize_window_times(w)


def make_toy_batch(n_windows=2, **kw):
    windows = [make_toy_window(seed=17 + i, window_id=i, **kw) for i in range(n_windows)]
    return collate(windows)


@pytest.fixture
def toy_window():
    return make_toy_window()


@pytest.fixture
def toy_batch():
    return make_toy_batch()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    pattern = re.compile(r"test_criterion_(\d+)")
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            match = pattern.search(getattr(report, "nodeid", ""))
            if match:
                status = "PASS" if outcome == "passed" else "FAIL"
                name = report.nodeid.split("::")[-1]
                lines[int(match.group(1))] = f"criterion {int(match.group(1)):2d}: {status}  {name}"
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
