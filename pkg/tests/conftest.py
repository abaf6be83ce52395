import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """4 bottles x 6 shared views, rendered once per session."""
    from shapepose.dataset import DatasetConfig, MultiViewDataset, generate_dataset

    root = tmp_path_factory.mktemp("data")
    generate_dataset(DatasetConfig(root=str(root), category="bottle", instances=4, views=6, seed=3))
    return MultiViewDataset.from_root(root, "bottle")


def pytest_terminal_summary(terminalreporter):
    import sys

    acc = sys.modules.get("test_acceptance")
    if acc is not None and acc.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acc.RESULTS):
            terminalreporter.write_line(acc.RESULTS[n])
