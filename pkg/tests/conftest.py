"""Session fixtures shared by the acceptance and integration suites."""

import os
from dataclasses import dataclass

import pytest

from maxk.brute import brute_force_bound
from maxk.certificates import Certificate
from maxk.model import decompose_paths
from maxk.training import TrainConfig, train

THREADS = os.cpu_count() or 1


@dataclass
class FleetEntry:
    seed: int
    params: object
    paths: object
    exact: Certificate


@pytest.fixture(scope="session")
def full_fleet():
    """Five full-recipe models at d_vocab 64, d_model 32, n_ctx 4, with
    their exhaustive certificates."""
    fleet = []
    for seed in range(5):
        config = TrainConfig(seed=seed, d_vocab=64, d_model=32, n_ctx=4, steps=3000, batch_size=128)
        params = train(config).params
        paths = decompose_paths(params)
        exact = brute_force_bound(params, threads=THREADS)
        fleet.append(FleetEntry(seed, params, paths, exact))
    return fleet


@pytest.fixture(scope="session")
def tiny_fleet():
    """Twenty quick models at d_vocab 8, d_model 8, n_ctx 3."""
    fleet = []
    for seed in range(20):
        config = TrainConfig(seed=seed, d_vocab=8, d_model=8, n_ctx=3, steps=1500, batch_size=128)
        params = train(config).params
        fleet.append(FleetEntry(seed, params, decompose_paths(params), brute_force_bound(params)))
    return fleet
