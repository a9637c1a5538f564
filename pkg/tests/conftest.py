import warnings

import numpy as np
import pytest

from privlora import ckks
from privlora.linalg import PackLayout
from privlora.pll import PllConfigWarning

# the full-size kernel layout used throughout: m = n = 64 padded, rank 8
KERNEL_LAYOUT = PackLayout(1, 64, 8, 64, 4096)
EXTRA_STEPS = [3, 5, 7, -3, 100, 1000]


@pytest.fixture(autouse=True)
def _quiet_pll_warning():
    # several fixed examples deliberately sit below the recommended gamma/q ratio
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PllConfigWarning)
        yield


@pytest.fixture(scope="session")
def params():
    return ckks.CkksParams.generate(8192)


@pytest.fixture(scope="session")
def keys(params):
    return ckks.keygen(params, KERNEL_LAYOUT.rotation_steps() + EXTRA_STEPS, rng=2024)


@pytest.fixture(scope="session")
def small_params():
    return ckks.CkksParams.generate(1024)


@pytest.fixture(scope="session")
def small_keys(small_params):
    return ckks.keygen(small_params, [1, 2, 4, 8, -1, -2, 16, 32, 64, 128, 256], rng=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
