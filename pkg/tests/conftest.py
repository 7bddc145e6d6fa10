import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trinoloc.library import build_library
from trinoloc.synth import SynthWorldConfig, generate_world

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# library files embed a creation timestamp; pin it so reruns are byte-identical
os.environ.setdefault("SOURCE_DATE_EPOCH", "1700000000")


@pytest.fixture(scope="session")
def small_world():
    """Zero-noise 40-location world with front aliasing."""
    return generate_world(SynthWorldConfig(num_locations=40, noise_sigma=0.0, seed=3))


@pytest.fixture(scope="session")
def small_library(small_world):
    lib, _ = build_library(small_world.records)
    return lib


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
