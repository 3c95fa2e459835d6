import numpy as np
import pytest

from defog.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def t64(data, requires_grad=False):
    """Float64 tensor helper for gradient checks."""
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def rand64(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape).astype(np.float64))
