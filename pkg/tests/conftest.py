import numpy as np
import pytest

from ctdelayid import CtModel, ExcitationSpec, SamplingSpec, bandwidth, design_bank
from ctdelayid.signals import make_dataset

CASE1_NUM = [2.0]
CASE1_DEN = [0.25, 0.7, 1.0]
CASE1_MONIC_THETA = np.array([2.8, 4.0, 8.0])
CASE2_NUM = [-6400.0, 1600.0]
CASE2_DEN = [1.0, 5.0, 408.0, 416.0, 1600.0]
CASE2_THETA = np.array([5.0, 408.0, 416.0, 1600.0, -6400.0, 1600.0])
TRUE_DELAY = 8.0


@pytest.fixture(scope="session")
def case1():
    return CtModel(CASE1_NUM, CASE1_DEN, TRUE_DELAY, check_coprime=True)


@pytest.fixture(scope="session")
def case2():
    return CtModel(CASE2_NUM, CASE2_DEN, TRUE_DELAY, check_coprime=True)


@pytest.fixture(scope="session")
def case1_bank(case1):
    return design_bank(bandwidth(case1), 10.0, 10, 10)


@pytest.fixture(scope="session")
def case1_clean(case1):
    """Noise-free Case 1 record on the regular 50 ms grid."""
    exc = ExcitationSpec(stages=10, clock_period=0.05)
    samp = SamplingSpec("regular", 4000, h=0.05)
    data, x = make_dataset(case1, exc, samp, None, noise_seed=0)
    return data, x


@pytest.fixture(scope="session")
def case1_noisy(case1):
    """Case 1 at 15 dB on the regular grid."""
    exc = ExcitationSpec(stages=10, clock_period=0.05)
    samp = SamplingSpec("regular", 4000, h=0.05)
    data, x = make_dataset(case1, exc, samp, 15.0, noise_seed=7)
    return data, x


@pytest.fixture(scope="session")
def case1_irregular(case1):
    exc = ExcitationSpec(stages=10, clock_period=0.5)
    samp = SamplingSpec("irregular_uniform", 4000, lo=0.01, hi=0.09, seed=5)
    data, x = make_dataset(case1, exc, samp, None, noise_seed=0)
    return data, x
