import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from asiseg import AsiSegModel, ModelConfig, SynthConfig, TrainConfig, generate_dataset
from asiseg.data import load_split
from asiseg.train_eval import train


@pytest.fixture(scope="session")
def mini_root(tmp_path_factory):
    """Small deterministic dataset shared across test modules."""
    root = tmp_path_factory.mktemp("mini_data")
    generate_dataset(SynthConfig(n_train=10, n_val=4, seed=7), root)
    return root


@pytest.fixture(scope="session")
def mini_train(mini_root):
    return load_split(mini_root, "train")


@pytest.fixture(scope="session")
def mini_val(mini_root):
    return load_split(mini_root, "val")


@pytest.fixture(scope="session")
def tiny_trained_model(mini_train):
    """Model with a couple of optimization epochs; enough for pipeline tests."""
    model = AsiSegModel(ModelConfig(seed=0))
    train(model, mini_train, TrainConfig(epochs=2, seed=0))
    return model
