import numpy as np
import pytest

import loadcast as lc


@pytest.fixture(autouse=True)
def _no_nan_trap():
    lc.set_nan_trap(False)
    yield
    lc.set_nan_trap(False)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_records():
    """90 synthetic days used by data/model/forecaster tests."""
    return lc.synthesize_dataset(11, 90)


@pytest.fixture(scope="session")
def small_split(small_records):
    recs = small_records
    return lc.split_train_test(recs, recs[-7].date, recs[-1].date)
