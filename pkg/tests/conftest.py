"""Shared fixtures.

Softmax calibration is deterministic for a fixed dimension, so the two plans
used across the suite are built once per session.
"""

import pytest

from hesim import calibrate_softmax


@pytest.fixture(scope="session")
def plan8():
    return calibrate_softmax(8)


@pytest.fixture(scope="session")
def plan128():
    return calibrate_softmax(128)
