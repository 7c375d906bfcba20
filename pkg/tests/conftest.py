import numpy as np
import pytest

from pislab.model import ModelConfig, PisModel, init_params
from pislab.scenes import make_record
from pislab.text import EncoderConfig


@pytest.fixture(scope="session")
def records():
    return [make_record(s) for s in range(24)]


@pytest.fixture
def params():
    return init_params(ModelConfig(), seed=0)


@pytest.fixture
def model(params):
    return PisModel(params)


@pytest.fixture
def tiny_cfg():
    """An 8x8 image with 4x4 patches keeps finite differences cheap."""
    return ModelConfig(encoder=EncoderConfig(model_dim=16, layers=1, heads=2, bottleneck_dim=4, max_len=8),
                       image_size=8, patch=4, vision_layers=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
