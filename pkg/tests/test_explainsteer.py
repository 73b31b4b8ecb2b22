import csv

import numpy as np
import pytest

from steerfix.engine import Batch
from steerfix.errors import DimensionError, DomainError, UnsupportedError
from steerfix.explainsteer import (
    SaliencyScores,
    backproject_e1,
    explain_network,
    heatmap_matrix,
    reduce_e0,
    saliency,
    saliency_batches,
    spectrum_ed,
    write_reports,
)
from steerfix.filterbank import FilterSpec, dct2_basis, generate_filters
from steerfix.model import GraphBuilder
from steerfix.netgraph import apply_initializer, initializer_specs, spatial_layers
from steerfix.numerics import RngStream


def test_basis_filter_has_one_hot_spectrum():
    basis = dct2_basis(3, 3)
    for row in range(9):
        e_d = spectrum_ed(basis.matrix[row][None], basis, np.ones(1))
        assert np.allclose(e_d, np.eye(9)[row], atol=1e-12)


def test_spectrum_cardinalities():
    basis = dct2_basis(5, 5)
    F = RngStream(0).normal(0, 1, (20, 25))
    e_d = spectrum_ed(F, basis, np.full(20, 0.05))
    e1 = backproject_e1(e_d, basis)
    e0 = reduce_e0(e1, 2, basis.sizes)
    assert (e_d.shape, e1.shape, e0.shape) == ((25,), (10,), (5,))


def test_backprojection_of_a_single_energy():
    basis = dct2_basis(3, 3)
    row = 1 * 3 + 2
    e_d = np.zeros(9)
    e_d[row] = 4.0
    e1 = backproject_e1(e_d, basis)
    assert np.allclose(e1, [0, 2, 0, 0, 0, 2])
    assert np.allclose(reduce_e0(e1, 2, (3, 3)), [0, 1, 1])


def test_spectrum_errors():
    basis = dct2_basis(3, 3)
    with pytest.raises(DomainError):
        spectrum_ed(np.ones((2, 9)), basis, np.array([1.0, -1.0]))
    with pytest.raises(DimensionError):
        spectrum_ed(np.ones((2, 4)), basis, np.ones(2))
    with pytest.raises(DimensionError):
        spectrum_ed(np.ones((2, 9)), basis, np.ones(3))
    with pytest.raises(UnsupportedError):
        reduce_e0(np.ones(5), 2, (2, 3))


def test_dct2_filters_give_a_flat_spectrum():
    kernels = generate_filters(FilterSpec('dct2', (3, 3), 100000, seed=1)).reshape(-1, 9)
    e_d = spectrum_ed(kernels, dct2_basis(3, 3), np.full(len(kernels), 1.0 / len(kernels)))
    assert np.max(np.abs(e_d / e_d.mean() - 1.0)) < 0.05


def test_ghaar_energy_decays_with_frequency():
    kernels = generate_filters(FilterSpec('ghaar', (3, 3), 20000, seed=2)).reshape(-1, 9)
    basis = dct2_basis(3, 3)
    e1 = backproject_e1(spectrum_ed(kernels, basis, np.full(20000, 1 / 20000)), basis)
    e0 = reduce_e0(e1, 2, (3, 3))
    assert e0[0] > e0[-1]


def test_guided_steer_heatmap_matches_guide():
    basis = dct2_basis(3, 3)
    scales = np.linspace(1.5, 0.3, 9)
    guide = (RngStream(3).normal(0, 1, (20000, 9)) * scales) @ basis.matrix
    spec = FilterSpec('guided-steer', (3, 3), 20000, seed=4, guide=guide.reshape(-1, 3, 3))
    kernels = generate_filters(spec).reshape(-1, 9)
    uniform = np.full(20000, 1 / 20000)
    expected = spectrum_ed(guide, basis, uniform)
    assert np.allclose(spectrum_ed(kernels, basis, uniform), expected, rtol=0.1)


def _grouped_net():
    b = GraphBuilder(seed=2)
    x = b.input(1)
    x = b.pointwise(x, 'expand', 4)
    x = b.conv2d(x, 'spatial', 4, groups=2)
    x = b.conv2d(x, 'wide', 2, kernel=5)
    x = b.global_avg_pool(x, 'pool')
    x = b.linear(x, 'fc', 2)
    return b.build([x], task='multilabel')


def _labeled(n, tasks=2, seed=0, targets=None):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, (n, tasks)) if targets is None else targets
    return Batch(rng.normal(size=(n, 1, 10, 10)), labels)


def test_saliency_shapes_and_signs():
    net = _grouped_net()
    scores = saliency(net, [_labeled(4, seed=s) for s in range(3)])
    assert scores.scores['spatial'].shape == (4, 2)
    assert scores.scores['wide'].shape == (2, 4)
    assert scores.covers(net)
    assert np.all(scores.flat() >= 0) and scores.flat().sum() > 0
    grads = saliency(net, [_labeled(4)], grad_only=True)
    assert not np.allclose(grads.flat(), saliency(net, [_labeled(4)]).flat())


def test_saliency_vanishes_without_positive_labels():
    net = _grouped_net()
    scores = saliency(net, [_labeled(4, targets=np.zeros((4, 2)))])
    assert np.all(scores.flat() == 0)


def test_zero_kernel_has_zero_saliency():
    net = _grouped_net()
    weight = net.param('wide', 'weight')
    tensor = weight.tensor.copy()
    tensor[1, 3] = 0
    scores = saliency(net.with_params([weight.replace(tensor=tensor)]), [_labeled(4)])
    assert scores.scores['wide'][1, 3] == 0
    assert scores.scores['wide'][0, 3] > 0


def test_saliency_needs_labels():
    with pytest.raises(DomainError):
        saliency(_grouped_net(), [Batch(np.zeros((1, 1, 10, 10)))])


def test_saliency_batches(blobs):
    batches = saliency_batches(blobs, RngStream(0), num_batches=3, batch_size=4)
    assert [len(b) for b in batches] == [4, 4, 4]


def test_explain_network(tiny_resnet):
    spectra = explain_network(tiny_resnet)
    assert [s.layer_id for s in spectra] == [n.id for n in spatial_layers(tiny_resnet)]
    assert all(s.weights_used == 'uniform' and s.e0.shape == (3,) for s in spectra)
    scores = SaliencyScores(
        {
            n.id: np.ones(tiny_resnet.param(n.id, 'weight').shape[:2])
            for n in spatial_layers(tiny_resnet)
        }
    )
    weighted = explain_network(tiny_resnet, saliency=scores)
    assert weighted[0].weights_used == 'saliency'
    assert np.allclose(weighted[0].e_d, spectra[0].e_d * 8)


def test_explain_network_mixed_kernel_sizes():
    spectra = explain_network(_grouped_net())
    assert spectra[1].kernel_shape == (5, 5) and spectra[1].e0.shape == (5,)
    groups = heatmap_matrix(spectra)
    assert groups[(3, 3)][0].shape == (9, 1) and groups[(5, 5)][1] == ['wide']


def test_explain_network_without_spatial_layers():
    b = GraphBuilder()
    x = b.pointwise(b.input(1), 'pw', 1)
    with pytest.raises(DomainError):
        explain_network(b.build([x]))


def test_box_filters_put_all_energy_in_the_dc_row(tiny_resnet):
    net = apply_initializer(tiny_resnet, initializer_specs(tiny_resnet, 'ones'))
    [(matrix, labels)] = heatmap_matrix(explain_network(net)).values()
    assert matrix.shape == (9, 3) and len(labels) == 3
    assert np.allclose(matrix[0], 3.0)
    assert np.allclose(matrix[1:], 0.0, atol=1e-5)


def test_write_reports(tmp_path, tiny_resnet):
    paths = write_reports(explain_network(tiny_resnet), tmp_path)
    assert set(paths) == {'spectra.csv', 'e1.csv', 'e0.csv', 'bars.csv', 'heatmap.svg'}
    with open(paths['spectra.csv']) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3 * 9
    assert rows[1]['basis_index'] == '1' and (rows[1]['kh'], rows[1]['kw']) == ('0', '1')
    svg = paths['heatmap.svg'].read_text()
    assert svg.startswith('<?xml') and svg.count('<rect') == 27
