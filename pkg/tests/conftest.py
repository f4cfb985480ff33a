import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trajdistill import buffer as B  # noqa: E402
from trajdistill.datasets import gen_blobs, split_per_class  # noqa: E402
from trajdistill.nn import ModelSpec  # noqa: E402


@pytest.fixture(scope="session")
def blobs():
    """16-d, 3-class blobs split into train/test (the desk fixture task)."""
    return split_per_class(gen_blobs(3, 140, 16, 0.12, 0), 40, 1)


@pytest.fixture(scope="session")
def mlp_spec():
    return ModelSpec("mlp", 1, 32, (16,), 3)


@pytest.fixture(scope="session")
def small_data():
    return gen_blobs(3, 20, 6, 0.1, seed=5)


@pytest.fixture(scope="session")
def small_spec():
    return ModelSpec("mlp", 1, 8, (6,), 3)


@pytest.fixture(scope="session")
def small_traj(small_data, small_spec):
    return B.train_expert(small_data, small_spec, B.SmoothnessConfig(),
                          B.OptimizerSettings(lr=0.05, batch_size=20), epochs=4, seed=1)


@pytest.fixture(scope="session")
def expert_traj(blobs, mlp_spec):
    tr, te = blobs
    return B.train_expert(tr, mlp_spec, B.SmoothnessConfig(),
                          B.OptimizerSettings(lr=0.05, momentum=0.9, batch_size=30), 8, 0, te)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
