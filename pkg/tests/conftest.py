import numpy as np
import pytest

from fedeu.config import ExperimentConfig, FederationConfig
from fedeu.data import ClientSpec, SyntheticTaskSpec
from fedeu.model import NetworkConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    return NetworkConfig(in_channels=1, image_size=(8, 8), widths=(4, 6), adapter_bottleneck=2,
                         cfe_stage=2, num_clients=2)


def toy_task(seed=0, n_train=8, n_test=4, size=16):
    return SyntheticTaskSpec(
        clients=(ClientSpec("blobs", (0.0,), 0.05, 1.0, 0.9),
                 ClientSpec("strips", (0.1,), 0.08, 1.0, 0.9)),
        image_size=size, n_train=n_train, n_test=n_test, radius=(2, 4), seed=seed,
    )


def toy_config(tmp_path, seed=0, rounds=2, **fed):
    fed = {"rounds": rounds, "epochs": 1, "batch_size": 4, **fed}
    return ExperimentConfig(
        seed=seed, data=toy_task(seed),
        network=NetworkConfig(widths=(4, 8), adapter_bottleneck=2, cfe_stage=2),
        federation=FederationConfig(**fed), output_dir=str(tmp_path / "run"),
    )
