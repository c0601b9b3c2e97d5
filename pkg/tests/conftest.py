from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fibre_adiabatic.fibre import FibreBasis, solve_band
from fibre_adiabatic.geometry import BaseCircle, build_strip_model, build_warped_model

settings.register_profile(
    "artifact", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("artifact")

STRIP_PROFILE = "0.25 + 0.1*cos(x)"
WARPED_PROFILE = "2*pi*(1 + 0.2*cos(x))"
TWO_PI = 2 * math.pi


def strip(profile=STRIP_PROFILE, n_x=32, eps=0.2, **kw):
    return build_strip_model(profile, BaseCircle(TWO_PI, n_x), eps, **kw)


def warped(profile=WARPED_PROFILE, n_x=32, eps=0.2, **kw):
    return build_warped_model(profile, BaseCircle(TWO_PI, n_x), eps, **kw)


@pytest.fixture(scope="session")
def strip_model():
    return strip()


@pytest.fixture(scope="session")
def warped_model():
    return warped()


@pytest.fixture(scope="session")
def strip_band(strip_model):
    return solve_band(strip_model, 0, FibreBasis("legendre", 12))


@pytest.fixture(scope="session")
def warped_band(warped_model):
    return solve_band(warped_model, 0, FibreBasis("fourier", 12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
