"""Shared fixtures. The trained default pipeline is expensive (a couple of
minutes) and session-scoped; tests that only need structure use the tiny
pipeline instead.
"""

import numpy as np
import pytest

from fairdiff import harness
from fairdiff.diffcore import DenoiserTrainConfig, default_schedule, train_denoiser
from fairdiff.numkit import RngStream, init_mlp
from fairdiff.synthdata import default_world, sample_dataset


@pytest.fixture(scope="session")
def world():
    return default_world()


@pytest.fixture(scope="session")
def sched():
    return default_schedule()


@pytest.fixture(scope="session")
def default_spec():
    return harness.load_spec(None)


@pytest.fixture(scope="session")
def artifacts_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("artifacts")


@pytest.fixture(scope="session")
def pipeline(default_spec, artifacts_dir):
    """Fully trained default pipeline (denoiser, banks, evaluators)."""
    return harness.build_pipeline(default_spec, artifacts_dir)


@pytest.fixture(scope="session")
def tiny_denoiser(world, sched):
    """Small, briefly trained denoiser for structural tests."""
    rng = RngStream(3)
    data = sample_dataset(world, 600, rng)
    net = init_mlp([2 + 8, 32, 16, 32, 2], bottleneck_index=2, rng=rng.child("net"))
    train_denoiser(data, sched, net, DenoiserTrainConfig(epochs=8, seed=4))
    return net
