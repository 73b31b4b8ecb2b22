import numpy as np
import pytest

from steerfix.engine import predict
from steerfix.errors import ConfigError
from steerfix.model import (
    GraphBuilder,
    UNETD_REFERENCE_PARAMS,
    build_network,
    build_tiny_densenet,
    build_unetd,
    unetd_reference_report,
)
from steerfix.netgraph import LayerKind, spatial_layers


@pytest.fixture(scope='module')
def unetd():
    return build_unetd(seed=0)


def test_unetd_parameter_count(unetd):
    assert unetd.num_parameters() == 87401
    assert unetd.num_parameters(spatial=True) == 9747
    share = unetd.num_parameters(spatial=True) / unetd.num_parameters()
    assert 0.08 <= share <= 0.14


def test_unetd_breakdown(unetd):
    breakdown = unetd.parameter_breakdown()
    assert breakdown['enc0'] == (102, 54)
    assert breakdown['dec3'][0] == 41856 + 2
    assert breakdown['head'] == (27, 27)


def test_unetd_structure(unetd):
    kinds = {n.kind for n in unetd.nodes}
    assert LayerKind.SCALAR_FUSION in kinds and LayerKind.BILINEAR_UPSAMPLE in kinds
    depthwise = [n for n in spatial_layers(unetd) if n.id != 'head.conv']
    assert all(n.groups == n.attrs['in_channels'] == n.attrs['out_channels'] for n in depthwise)
    assert unetd.meta['task'] == 'segmentation'


def test_unetd_reference_report(unetd):
    summary = unetd_reference_report(unetd)
    assert summary['reference'] == UNETD_REFERENCE_PARAMS
    assert summary['difference'] == 87401 - UNETD_REFERENCE_PARAMS


def test_unetd_forward_shape(unetd):
    x = np.random.default_rng(0).uniform(size=(2, 1, 32, 32)).astype(np.float32)
    y = predict(unetd, x)
    assert y.shape == (2, 1, 32, 32)
    assert np.all(np.isfinite(y))


def test_unetd_keeps_a_64x64_image_size(unetd):
    x = np.random.default_rng(1).uniform(size=(1, 1, 64, 64)).astype(np.float32)
    assert predict(unetd, x).shape == (1, 1, 64, 64)


def test_builder_records_channel_attributes():
    b = GraphBuilder(seed=3)
    x = b.input(2)
    y = b.batch_norm(b.conv2d(x, 'conv', 5), 'bn')
    net = b.build([y])
    assert net.node('input').attrs['channels'] == 2
    assert net.node('bn').attrs['channels'] == 5
    assert net.out_channels['bn'] == 5


def test_tiny_networks_forward(tiny_resnet):
    x = np.zeros((3, 1, 16, 16), dtype=np.float32)
    assert predict(tiny_resnet, x).shape == (3, 5)
    densenet = build_tiny_densenet(blocks=2, growth=4)
    assert densenet.num_parameters() == 1013
    assert densenet.num_parameters(spatial=True) == 648
    assert densenet.out_channels['dense1.concat'] == 16
    assert predict(densenet, x).shape == (3, 5)


def test_build_network_dispatch():
    assert build_network('tiny-resnet', seed=1).meta['architecture'] == 'tiny-resnet'
    with pytest.raises(ConfigError):
        build_network('vgg')
    with pytest.raises(ConfigError):
        build_unetd(widths=(8,))


def test_builder_is_seeded():
    assert build_network('tiny-densenet', seed=4) == build_network('tiny-densenet', seed=4)
    assert build_network('tiny-densenet', seed=4) != build_network('tiny-densenet', seed=5)
