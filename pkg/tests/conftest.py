"""Shared fixtures. The repository uses a flat module layout, so put its root on sys.path."""

import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def rng_factory():
    """Independent generators with explicit seeds."""
    return lambda seed: np.random.default_rng(seed)
