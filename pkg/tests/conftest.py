"""
Shared fixtures for the OrthoCal test suite
"""

from pathlib import Path
import sys

import numpy as np
import pytest

# Add src (and the project root for orthocal.py) to path
ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(ROOT / 'src'))
sys.path.insert(0, str(ROOT))

from core.models import Design, NoiseModel, sample_field_data
from core.numerics import Box, gauss_legendre_rule
from core.reference_models import bivariate, model1, model1_truth, model2


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def rule():
    return gauss_legendre_rule(32)


@pytest.fixture
def small_rule():
    return gauss_legendre_rule(8)


@pytest.fixture
def m1():
    return model1()


@pytest.fixture
def m2():
    return model2()


@pytest.fixture
def biv():
    return bivariate()


@pytest.fixture
def design():
    return Design(np.linspace(0.02, 0.98, 25), Box.unit(1))


@pytest.fixture
def model1_data():
    """n = 50 noisy Model 1 observations with sigma = 0.2"""
    d = Design.uniform(50, seed=3)
    return sample_field_data(model1_truth, NoiseModel.isotropic(0.2), d, seed=4)
