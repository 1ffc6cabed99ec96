import numpy as np
import pytest

from mdsonify import hmm, msm
from mdsonify.trajio import ObservedChain


def four_well_truth(n_obs: int = 20) -> hmm.HiddenModel:
    """Synthetic 4-well surrogate: zero 1<->3 and 2<->4 transitions,
    disjoint emission blocks of n_obs/4 observed states per well."""
    T = np.array([
        [0.96, 0.02, 0.00, 0.02],
        [0.03, 0.94, 0.03, 0.00],
        [0.00, 0.02, 0.95, 0.03],
        [0.01, 0.00, 0.02, 0.97],
    ])
    pi = msm.stationary(T)
    per = n_obs // 4
    emission = np.zeros((4, n_obs))
    for A in range(4):
        block = np.linspace(2.0, 1.0, per)
        emission[A, A * per:(A + 1) * per] = block / block.sum()
    return hmm.HiddenModel(T_hidden=T, emission=emission, pi=pi, lag_ps=1.0)


@pytest.fixture(scope="session")
def four_well_hmm() -> hmm.HiddenModel:
    return four_well_truth()


@pytest.fixture(scope="session")
def four_well_chain(four_well_hmm) -> ObservedChain:
    return hmm.sample_chain(four_well_hmm, length=200_000, seed=11)


@pytest.fixture(scope="session")
def four_well_msm(four_well_chain) -> msm.TransitionModel:
    counts = msm.count_transitions([four_well_chain], lag=1)
    return msm.estimate_T(counts, reversible=True)


@pytest.fixture(scope="session")
def four_well_fit(four_well_chain, four_well_msm) -> hmm.HiddenModel:
    return hmm.estimate_hmm([four_well_chain], m=4, lag=1, init=four_well_msm,
                            tol=1e-4, seed=3)


def random_irreducible_T(rng: np.random.Generator, n: int) -> np.ndarray:
    """Dense positive row-stochastic matrix (irreducible by construction)."""
    T = rng.uniform(0.05, 1.0, size=(n, n))
    return T / T.sum(axis=1, keepdims=True)


def make_chain(states, n_states=None, dt=1.0) -> ObservedChain:
    states = np.asarray(states, dtype=np.int64)
    if n_states is None:
        n_states = int(states.max()) + 1
    return ObservedChain(states=states, n_states=n_states, dt=dt)
