import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nocspose.geometry import CameraIntrinsics, compute_nocs_bounds, convex_blob_mesh, cylinder_mesh


@pytest.fixture(scope="session")
def blob():
    return convex_blob_mesh(0)


@pytest.fixture(scope="session")
def blob_bounds(blob):
    return compute_nocs_bounds(blob)


@pytest.fixture(scope="session")
def cylinder():
    return cylinder_mesh(0.5, 1.5, 32)


@pytest.fixture(scope="session")
def camera():
    return CameraIntrinsics(150.0, 150.0, 64.0, 64.0, 128, 128)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
