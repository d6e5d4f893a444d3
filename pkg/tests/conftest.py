import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240321)


def random_spd(rng, n, jitter=0.1, scale=1.0):
    m = rng.standard_normal((n, n))
    return scale * (m @ m.T) + jitter * np.eye(n)
