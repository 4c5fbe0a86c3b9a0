import numpy as np
import pytest

from tes import data, nn
from tes.simcore import derive_stream

TRAIN_SEED = 1
VAL_SEED = 1001


@pytest.fixture(scope="session")
def synth_train():
    return data.synth_dataset(8000, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def synth_validation():
    return data.synth_dataset(4000, seed=VAL_SEED, split="validation")


@pytest.fixture(scope="session")
def trained_model(synth_train):
    """Classifier shared by the compression-table and inference tests."""
    model = nn.init_model(TRAIN_SEED)
    rng = derive_stream(TRAIN_SEED, ("fixture", 0, "shuffle"))
    return nn.train_sgd(
        model, synth_train.images, synth_train.labels, epochs=5, batch_size=32, lr=0.05, rng=rng
    )


@pytest.fixture(scope="session")
def accuracy_ladder(trained_model, synth_validation):
    return data.build_accuracy_table(trained_model, synth_validation, data.default_ladder())
