import numpy as np
import pytest

from steerfix.datasets import generate_dataset
from steerfix.model import GraphBuilder, build_tiny_densenet, build_tiny_resnet


def four_kernel_net(seed: int = 0):
    """input(1) -> 1x1 (2) -> 3x3 (2 -> 2) -> 1x1 (1): one spatial layer with 2x2 kernels."""
    b = GraphBuilder(seed)
    x = b.input(1)
    x = b.pointwise(x, 'pw1', 2)
    x = b.conv2d(x, 'conv', 2)
    x = b.pointwise(x, 'pw2', 1)
    return b.build([x], task='segmentation')


def probes(count: int, size: int = 16, channels: int = 1, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(count, channels, size, size))


@pytest.fixture
def small_net():
    return four_kernel_net()


@pytest.fixture
def tiny_resnet():
    return build_tiny_resnet(seed=0)


@pytest.fixture
def tiny_densenet():
    return build_tiny_densenet(seed=0)


@pytest.fixture(scope='session')
def blobs():
    return generate_dataset('blobs-cls5', 16, seed=0, size=16)


@pytest.fixture(scope='session')
def shapes():
    return generate_dataset('shapes-seg', 8, seed=0, size=32)
