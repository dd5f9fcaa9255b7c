import numpy as np
import pytest

from atas.data import synth_generate
from atas.models import ModelConfig, build


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    return synth_generate(num_classes=4, per_class=12, image_size=8, noise=0.3, seed=3)


def tiny_mlp(data, seed=0, widths=(12,)):
    return build(ModelConfig("mlp", input_shape=data.input_shape, widths=widths,
                             num_classes=data.num_classes, seed=seed))


def tiny_cnn(data, seed=0, channels=(2, 3)):
    return build(ModelConfig("cnn", input_shape=data.input_shape, channels=channels,
                             num_classes=data.num_classes, seed=seed))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[k])
