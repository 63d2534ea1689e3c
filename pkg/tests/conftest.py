"""
Shared fixtures for the test suites.
"""

import numpy as np
import pytest


@pytest.fixture
def rng():
    """Seeded Philox generator for tests that need throwaway randomness."""
    return np.random.Generator(np.random.Philox(12345))
