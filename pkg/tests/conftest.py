"""
Shared fixtures: float64 numerics, seeded generators and deliberately tiny spaces.
"""
import numpy as np
import pytest

from supernet_search.autodiff import get_default_dtype, set_default_dtype
from supernet_search.conv_macro import ConvMacroConfig, ConvMacroSupernet
from supernet_search.tiny_lm import TinyLMConfig, TinyLMSupernet
from supernet_search.toy_cell import ToyCellConfig, ToyCellSupernet
from supernet_search.training import ArrayDataset


@pytest.fixture(autouse=True)
def float64_numerics():
    previous = "float64" if get_default_dtype() is np.float64 else "float32"
    set_default_dtype("float64")
    yield
    set_default_dtype(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_macro_config():
    return ConvMacroConfig(kernels=(3, 5), channels=((2, 4), (4, 8)), in_channels=1, num_classes=4)


@pytest.fixture
def small_cell_config():
    return ToyCellConfig(base_channels=4, num_classes=4, in_channels=1)


@pytest.fixture
def small_lm_config():
    return TinyLMConfig(
        vocab_size=12, context=6, embed=(4, 8), heads=(1, 2), mlp_ratio=(1, 2), layers=(1, 2)
    )


@pytest.fixture
def small_macro(small_macro_config):
    return ConvMacroSupernet(small_macro_config, mode="WE", seed=0)


@pytest.fixture
def small_cell(small_cell_config):
    return ToyCellSupernet(small_cell_config, mode="WE", seed=0)


@pytest.fixture
def small_lm(small_lm_config):
    return TinyLMSupernet(small_lm_config, mode="WE", seed=0)


@pytest.fixture
def image_batch(rng):
    return rng.standard_normal((3, 1, 8, 8))


@pytest.fixture
def token_batch(rng, small_lm_config):
    return rng.integers(0, small_lm_config.vocab_size, size=(2, small_lm_config.context))


@pytest.fixture
def tiny_images(rng):
    """Random 4-class image data; enough rows for a train/val split."""
    inputs = rng.standard_normal((24, 1, 8, 8))
    labels = np.arange(24) % 4
    return ArrayDataset(inputs, labels)
