import numpy as np
import pytest

from hitmdp_core import FiniteHiTMDP, random_mdp, random_policies


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mdp(rng):
    ''' Seeded 3-state, 2-option, 2-action model'''
    return random_mdp(3, 2, 2, rng, discount=0.8)


@pytest.fixture
def small_policies(small_mdp, rng):
    return random_policies(*small_mdp.shape, rng, smdp=True)


def deterministic_mdp(reward=1.0, discount=0.9):
    ''' S=1, K=1, A=1 model with a single self loop'''
    return FiniteHiTMDP(1, 1, 1, np.ones((1, 1, 1)), np.full((1, 1), reward), discount, np.ones((1, 1)))
