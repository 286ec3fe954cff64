import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from brute import random_mdp, random_policy  # noqa: E402


@pytest.fixture
def small_problem():
    mdp = random_mdp(3, S=4, A=2, gamma=0.9)
    pi_e = random_policy(4, 4, 2)
    pi_b = random_policy(5, 4, 2)
    return mdp, pi_e, pi_b


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
