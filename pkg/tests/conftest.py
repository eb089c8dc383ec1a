# Copyright (c) 2026 vflsim contributors
# See README.rst for license details.

import hypothesis
import numpy as np
import pytest

from vflsim.nn import DenseNet

hypothesis.settings.register_profile("default", max_examples=30, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net(rng):
    return DenseNet.initialise([6, 5, 4, 3], rng)
