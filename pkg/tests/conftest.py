import numpy as np
import pytest

from esknet.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tensor64(rng, shape, lo=-1.0, hi=1.0, requires_grad=True):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=requires_grad,
                  dtype=np.float64)
