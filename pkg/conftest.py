import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.append(os.path.dirname(__file__))

from models.dataset import sample_offline_dataset
from models.features import TabularFeatureMap
from models.generators import make_low_rank_mdp, make_random_tabular_mdp
from models.mdp import FiniteMdp, Policy, StateActionDist


@pytest.fixture
def small_mdp() -> FiniteMdp:
    return make_random_tabular_mdp(seed=3, num_states=6, num_actions=2, gamma=0.9)


@pytest.fixture
def deterministic_mdp() -> FiniteMdp:
    return make_random_tabular_mdp(seed=5, num_states=5, num_actions=2, gamma=0.8, stochastic=False)


@pytest.fixture
def two_state_chain() -> FiniteMdp:
    """State 0 moves to the absorbing state 1; reward 1 only in state 0."""
    transition = np.zeros((2, 1, 2))
    transition[0, 0, 1] = 1.0
    transition[1, 0, 1] = 1.0
    reward = np.array([[1.0], [0.0]])
    return FiniteMdp(transition, reward, 0.5, np.array([1.0, 0.0]))


@pytest.fixture
def low_rank():
    """(mdp, true features) for a 10x3 low-rank MDP with d = 4."""
    return make_low_rank_mdp(seed=1, num_states=10, num_actions=3, feature_dim=4, gamma=0.9)


@pytest.fixture
def uniform_nu(small_mdp) -> StateActionDist:
    return StateActionDist.uniform(small_mdp.num_states, small_mdp.num_actions)


@pytest.fixture
def uniform_policy(small_mdp) -> Policy:
    return Policy.uniform(small_mdp.num_states, small_mdp.num_actions)


@pytest.fixture
def one_hot(small_mdp) -> TabularFeatureMap:
    return TabularFeatureMap.one_hot(small_mdp.num_states, small_mdp.num_actions)


@pytest.fixture
def small_dataset(small_mdp, uniform_nu):
    return sample_offline_dataset(small_mdp, uniform_nu, 4000, seed=0)


@pytest.fixture
def random_policy():
    def build(num_states: int, num_actions: int, seed: int) -> Policy:
        probs = np.random.default_rng(seed).dirichlet(np.ones(num_actions), size=num_states)
        return Policy(probs / probs.sum(axis=1, keepdims=True))
    return build
