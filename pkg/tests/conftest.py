import os

import numpy as np
import pytest

from bitfault import datasets, network, quant


BUNDLED_MAP = os.path.join(os.path.dirname(os.path.dirname(__file__)), 'bitfault', 'data', 'chip2_like')


##
# Small networks and data that keep every test fast. The synthetic digits are 12x12 single-channel images.
@pytest.fixture(scope='module')
def synthetic_train():
    return datasets.synthetic_digits(200, seed=1, prototype_seed=0)


@pytest.fixture(scope='module')
def synthetic_test():
    return datasets.synthetic_digits(120, seed=2, prototype_seed=0)


@pytest.fixture
def tiny_cnn():
    return network.simplenet(stages=((4,), (8,)), input_size=12, groups=2, seed=0)


@pytest.fixture
def tiny_mlp():
    return network.mlp((1, 12, 12), hidden=(16,), seed=0)


@pytest.fixture
def quantized_mlp(tiny_mlp):
    return tiny_mlp, quant.quantize(tiny_mlp.parameters(), quant.rquant(8))


@pytest.fixture(scope='module')
def bundled_map_dir():
    return BUNDLED_MAP


def random_batch(n=3, shape=(1, 6, 6), num_classes=10, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return rng.random((n,) + tuple(shape)).astype(dtype), rng.integers(0, num_classes, size=n)
