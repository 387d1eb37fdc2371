"""Shared fixtures and the acceptance-suite reporter.

Set CYCLELIFE_DATASET to a directory holding the real dataset in canonical
layout (manifest.csv + G*C*.csv) to enable the dataset-backed acceptance
criteria; they are skipped otherwise.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from cyclelife.curves import build_curve_dataset
from cyclelife.ingest import run_ingest
from cyclelife.synth import SynthSpec, generate_synthetic

DATASET_ENV = "CYCLELIFE_DATASET"


def dataset_dir():
    path = os.environ.get(DATASET_ENV)
    if path and Path(path, "manifest.csv").exists():
        return Path(path)
    return None


requires_dataset = pytest.mark.skipif(
    dataset_dir() is None,
    reason=f"real dataset not present (set {DATASET_ENV})",
)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    spec = SynthSpec(n_groups=12, cells_per_group=4, noise=1.0, seed=11,
                     half_week_min_group=9)
    truths, manifest = generate_synthetic(spec, d)
    return d, truths


@pytest.fixture(scope="session")
def synth_ingest(synth_dir):
    d, truths = synth_dir
    return run_ingest(d / "manifest.csv", d, seed=4), truths


@pytest.fixture(scope="session")
def synth_curves(synth_ingest):
    result, truths = synth_ingest
    return build_curve_dataset(result.cells, splits=result.splits), result, truths


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for status in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance" not in getattr(rep, "nodeid", ""):
                continue
            name = rep.nodeid.split("::")[-1]
            lines.append((name, status.upper()))
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, status in sorted(set(lines)):
        terminalreporter.write_line(f"{status:8s} {name}")
