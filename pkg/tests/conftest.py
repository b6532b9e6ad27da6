import numpy as np
import pytest
import torch

from gatedsr.benchmarks import get_benchmark, make_datasets
from gatedsr.expressions import TokenLibrary
from gatedsr.numerics import DATA_STREAM, RngStream
from gatedsr.schemas import MaskConfig, NgmHyper, RunConfig, TrainerConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-scale tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def lib1():
    return TokenLibrary.standard(1)


@pytest.fixture
def lib2():
    return TokenLibrary.standard(2)


@pytest.fixture
def mask_cfg():
    return MaskConfig()


@pytest.fixture
def small_hyper():
    return NgmHyper(epochs=3, batch_size=64, hidden_size=16)


@pytest.fixture
def small_trainer():
    return TrainerConfig(batch_size=64, max_expressions=256, log_every=1, learning_rate=1e-3)


@pytest.fixture
def nguyen1_splits():
    spec = get_benchmark("Nguyen-1")
    return make_datasets(spec, (400, 20, 20), RngStream(0, DATA_STREAM))


@pytest.fixture
def small_config(tmp_path):
    return RunConfig.model_validate({
        "benchmark": "Nguyen-1",
        "seed": 0,
        "output_dir": str(tmp_path / "runs"),
        "data": {"ngm_rows": 400, "reward_rows": 20, "eval_rows": 20},
        "ngm": {"epochs": 2, "batch_size": 64, "hidden_size": 16},
        "trainer": {"batch_size": 32, "max_expressions": 96, "log_every": 1},
        "bench": {"benchmarks": ["Nguyen-1", "Nguyen-9"], "seeds": [0, 1], "noise_counts": [2], "jobs": 1},
    })


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
