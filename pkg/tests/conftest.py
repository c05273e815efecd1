import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from earshot.model import ModelConfig
from earshot.synthetic import SynthSpec


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_cfg():
    """Smallest config that exercises every architectural piece."""
    return ModelConfig(d_model=16, n_heads=2, ffn_mult=2, dropout=0.0,
                       mscnn_channels=12, layer_window=(12, 15),
                       backbones=("synthetic",), conditioning="categorical",
                       readout="cls", use_reference=True, ear_pooling="best")


@pytest.fixture
def tiny_spec():
    return SynthSpec(n_utterances=12, t_range=(16, 24),
                     available_window=(12, 15), planted_window=(12, 15), seed=0)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, with measured values."""
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::test_criterion" not in rep.nodeid:
                continue
            name = rep.nodeid.split("::", 1)[1]
            note = dict(rep.user_properties or {}).get("note", "")
            rows.append((name, "PASS" if outcome == "passed" else "FAIL", note))
    if not rows:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, flag, note in sorted(rows):
        terminalreporter.write_line(f"{flag}  {name}" + (f"  [{note}]" if note else ""))
