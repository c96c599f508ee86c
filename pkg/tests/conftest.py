import pytest

from kernel import FracParams, QuadConfig


@pytest.fixture
def params():
    return FracParams(alpha=0.5, gamma=1.0)


@pytest.fixture
def cfg():
    return QuadConfig()

