import numpy as np
import pytest

from mmtcbn import numcore as nc
from mmtcbn.config import desk_config


@pytest.fixture(autouse=True)
def _reset_precision():
    nc.set_precision("single")
    yield
    nc.set_precision("single")


@pytest.fixture
def double():
    nc.set_precision("double")
    yield
    nc.set_precision("single")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(**overrides):
    """Very small double-precision layout for exact or finite-difference checks."""
    base = dict(source_and_target_embeddings=4, gru_and_cgru_layer_size=3, attention_size=3,
                conditioning_size=3, cbn_mlp_hidden_units=4, resnet_input_size=(8, 8, 3),
                stage_channels=(2, 3, 4, 5), precision="double", pretrain_steps=0)
    base.update(overrides)
    return desk_config(**base)
