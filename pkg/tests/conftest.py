import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def ring_map():
    m = np.ones((5, 5), dtype=np.uint8)
    m[1:4, 1:4] = 0
    return m
