import numpy as np
import pytest

from spgm.separator import ModelConfig
from spgm.tensor import Tensor, finite_diff_grad_check, tsum

SEEDS = list(range(20))


def weighted_sum(fn, shape, rng):
    """Scalar probe ``sum(fn(x) * R)`` with a fixed random ``R``."""
    r = None

    def f(x):
        nonlocal r
        y = fn(x)
        if r is None:
            r = Tensor(rng.normal(size=y.shape))
        return tsum(y * r)

    return f


def gradcheck(fn, x0, rng, eps=1e-5, **kw):
    return finite_diff_grad_check(weighted_sum(fn, x0.shape, rng), Tensor(x0), eps=eps, rng=rng, **kw)


@pytest.fixture
def tiny_config():
    return ModelConfig(channels=8, ffn=16, heads=2, enc_kernel=4, enc_stride=2,
                       chunk_size=4, num_blocks=1, intra_layers=1)


@pytest.fixture
def toy_config():
    return ModelConfig(channels=32, ffn=64, heads=4, num_blocks=2, intra_layers=2,
                       chunk_size=50)
