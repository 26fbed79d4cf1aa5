"""Shared pytest fixtures: small truth models, snapshot sets and bases."""

from __future__ import annotations

import numpy as np
import pytest

from models.base import collect_snapshots, simulate
from models.burgers import Burgers1D
from models.synthetic import make_synthetic
from pod import compute_basis


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full preset runs (deselect with -m 'not slow')")


@pytest.fixture
def burgers():
    return Burgers1D(n=64, mu=0.02)


@pytest.fixture
def synthetic():
    return make_synthetic(12, seed=1, spectrum=np.linspace(2.0, 0.5, 12))


@pytest.fixture
def burgers_snapshots(burgers):
    z0 = burgers.initial_state("sine", 0.5, seed=0)
    traj = simulate(burgers, z0, None, t_f=0.2, dt=2e-3)
    return collect_snapshots(traj, stride=5)


@pytest.fixture
def synthetic_snapshots(synthetic):
    z0 = synthetic.initial_state("random", 1.0, seed=3)
    traj = simulate(synthetic, z0, None, t_f=5.0, dt=0.01)
    return collect_snapshots(traj, stride=10)


@pytest.fixture
def burgers_basis(burgers_snapshots):
    return compute_basis(burgers_snapshots, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
