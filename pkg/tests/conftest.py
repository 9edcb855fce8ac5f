import numpy as np
import pytest

from smident.lti_sim import ContinuousTF, generate_record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# small first-order plant; fast to simulate, poles well inside the unit circle
MINI_TF = ContinuousTF([1.0], [1.0, 1.0])
MINI_TS = 0.5


@pytest.fixture(scope="session")
def mini_record():
    return generate_record(MINI_TF, MINI_TS, 400, [-1.0, 0.0, 1.0],
                           hold_time=2.0, dbar0=0.05, seed=7)


@pytest.fixture(scope="session")
def mini_record_clean():
    return generate_record(MINI_TF, MINI_TS, 300, [-1.0, 0.0, 1.0],
                           hold_time=2.0, dbar0=0.0, seed=3)


# underdamped second-order plant; a first-order fit cannot track it, which
# exercises the rejection branch of the order scan
MINI2_TF = ContinuousTF([4.0], [1.0, 0.8, 4.0])


@pytest.fixture(scope="session")
def mini2_record():
    return generate_record(MINI2_TF, MINI_TS, 400, [-1.0, 0.0, 1.0],
                           hold_time=2.0, dbar0=0.05, seed=11)
