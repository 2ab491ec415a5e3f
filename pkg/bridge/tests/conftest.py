import pytest

from agem_bridge import resnet101_taps


@pytest.fixture(scope="session")
def backbone():
    # random init: pretrained weights are not fetchable in this environment,
    # and every property tested here is weight-independent
    return resnet101_taps(seed=3)
