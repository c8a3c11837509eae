import math

import numpy as np
import pytest

from chordarc.geometry import generate_curve


@pytest.fixture(scope="session")
def segment_curve():
    return generate_curve("segment", length=1.0)


@pytest.fixture(scope="session")
def semicircle_curve():
    return generate_curve("semicircle", radius=1.0, vertices=4097)


@pytest.fixture(scope="session")
def quarter_curve():
    return generate_curve("quarter-circle", radius=1.0, vertices=4097)


@pytest.fixture(scope="session")
def helix_curve():
    return generate_curve("helix", radius=1.0, pitch=0.25, t_max=math.pi, vertices=4097)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
