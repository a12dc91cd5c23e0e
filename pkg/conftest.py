"""
Shared pytest configuration.

Puts the repository root on sys.path so tests can ``from src.x import ...``
and registers the ``slow`` marker for the long acceptance runs
(deselect with ``-m "not slow"``).
"""

import numpy as np
import pytest

from src.ct_model import FanBeamGeometry


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


@pytest.fixture
def tiny_geometry() -> FanBeamGeometry:
    """16x16 image, 32 detectors, 48 views: fast enough for every unit test."""
    return FanBeamGeometry.for_image(16, fov=16.0, n_detectors=32, n_views=48)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.Philox(1234))
