import numpy as np
import pytest

from steerfix.errors import ConfigError, DimensionError, DomainError, UnsupportedError
from steerfix.filterbank import (
    FilterSpec,
    InitMethod,
    dct2_basis,
    dct2_filters,
    generate_filters,
    ghaar_kernel,
    guided_steer_filters,
    psine_kernel,
    sample_psine_terms,
)
from steerfix.numerics import RngStream


@pytest.mark.parametrize('h', [2, 3, 5])
@pytest.mark.parametrize('w', [2, 3, 5])
def test_dct2_basis_is_orthonormal(h, w):
    B = dct2_basis(h, w).matrix
    assert B.shape == (h * w, h * w)
    assert np.max(np.abs(B @ B.T - np.eye(h * w))) < 1e-5


def test_2x2_basis_is_haar():
    s = 0.5
    expected = np.array(
        [
            [s, s, s, s],
            [s, -s, s, -s],
            [s, s, -s, -s],
            [s, -s, -s, s],
        ]
    )
    assert np.allclose(dct2_basis(2, 2).matrix, expected, atol=1e-12)


def test_frequency_order():
    basis = dct2_basis(3, 3)
    ranked = [tuple(basis.factor_index[r]) for r in basis.ranked_rows]
    assert ranked == [(0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0), (1, 2), (2, 1), (2, 2)]
    assert np.allclose(basis.filter_at_rank(0), 1 / 3)


def test_dct2_basis_rejects_empty_shape():
    with pytest.raises(DomainError):
        dct2_basis(0, 3)


def test_steering_reconstructs_filters():
    basis = dct2_basis(3, 3)
    kernels = RngStream(0).normal(0, 1, (50, 9))
    weights = kernels @ basis.matrix.T
    assert np.allclose(weights @ basis.matrix, kernels, atol=1e-12)


def test_filter_spec_validation():
    with pytest.raises(ConfigError):
        FilterSpec('sobel', (3, 3), 4)
    with pytest.raises(ConfigError):
        FilterSpec('guided-steer', (3, 3), 4)
    with pytest.raises(ConfigError):
        FilterSpec('ghaar', (3, 3), 4, guide=np.ones((2, 3, 3)))
    with pytest.raises(ConfigError):
        FilterSpec('ghaar', (3, 3), -1)


def test_ones():
    kernels = generate_filters(FilterSpec('ones', (3, 3), 5))
    assert kernels.shape == (5, 3, 3) and kernels.dtype == np.float32
    assert np.all(kernels == 1)


def test_dct2_filters_are_basis_rows():
    basis = dct2_basis(3, 3)
    kernels = generate_filters(FilterSpec('dct2', (3, 3), 40, seed=2)).reshape(40, 9)
    distance = np.abs(kernels[:, None, :] - basis.matrix[None]).max(axis=2).min(axis=1)
    assert np.all(distance < 1e-6)
    with pytest.raises(DimensionError):
        dct2_filters(FilterSpec('dct2', (5, 5), 2), basis, RngStream(0))


def test_dct2_rows_are_drawn_uniformly():
    basis = dct2_basis(3, 3)
    kernels = generate_filters(FilterSpec('dct2', (3, 3), 10000, seed=5)).reshape(-1, 9)
    rows = np.argmax(np.abs(kernels @ basis.matrix.T), axis=1)
    frequencies = np.bincount(rows, minlength=9) / len(kernels)
    assert np.all(np.abs(frequencies - 1 / 9) < 0.02)


def test_ghaar_filters():
    kernels = generate_filters(FilterSpec('ghaar', (5, 5), 64, seed=3))
    assert kernels.shape == (64, 5, 5)
    assert np.allclose(np.linalg.norm(kernels.reshape(64, -1), axis=1), 1.0, atol=1e-5)
    again = generate_filters(FilterSpec('ghaar', (5, 5), 64, seed=3))
    assert np.array_equal(kernels, again)


def test_guided_steer_on_a_single_basis_row():
    b = dct2_basis(3, 3).matrix[4]
    [kernels] = guided_steer_filters(30, [np.tile(b, (20, 1))], RngStream(0))
    cosine = np.abs(kernels @ b) / np.linalg.norm(kernels, axis=1)
    assert np.all(cosine > 1 - 1e-5)


def test_ghaar_shape_errors():
    with pytest.raises(UnsupportedError):
        generate_filters(FilterSpec('ghaar', (2, 3), 4))
    with pytest.raises(DomainError):
        generate_filters(FilterSpec('ghaar', (1, 1), 4))


def test_ghaar_kernel_known_value():
    kernel = ghaar_kernel(2, [1.0], [0.0], [1.0])
    assert np.allclose(kernel, [[1.0, 1.0], [-1.0, -1.0]])


def test_psine_filters_are_whitened():
    kernels = generate_filters(FilterSpec('psine', (3, 3), 64, seed=4)).reshape(64, -1)
    assert np.allclose(kernels.mean(axis=1), 0.0, atol=1e-6)
    assert np.allclose(np.linalg.norm(kernels, axis=1), 1.0, atol=1e-5)


def test_psine_terms_constraints():
    terms = sample_psine_terms(500, RngStream(9))
    for length, powers, active in zip(terms.lengths, terms.powers, terms.active):
        used = powers[active]
        order = (length - 1) // 2
        assert length >= 2 * used.max() + 1
        assert used.min() >= 1 and used.max() <= order
        if order >= 2:
            assert np.any(used % 2 == 0) and np.any(used % 2 == 1)
    assert np.all(terms.weights[~terms.active] == 0)


def test_psine_constant_kernel_is_rejected():
    with pytest.raises(DomainError):
        psine_kernel(3, [1.0], [1.0], [1], [0.0])


def _anisotropic_guide(n, seed):
    basis = dct2_basis(3, 3)
    scales = np.linspace(2.0, 0.2, 9)
    return (RngStream(seed).normal(0, 1, (n, 9)) * scales) @ basis.matrix


@pytest.mark.parametrize('distribution', ['normal', 'kde'])
def test_guided_steer_reproduces_guide_variances(distribution):
    guide = _anisotropic_guide(4000, 11)
    [kernels] = guided_steer_filters(6000, [guide], RngStream(12), distribution=distribution)
    assert kernels.shape == (6000, 9)
    basis = dct2_basis(3, 3).matrix
    expected = np.var(guide @ basis.T, axis=0)
    generated = np.var(kernels.astype(np.float64) @ basis.T, axis=0)
    assert np.allclose(generated, expected, rtol=0.15)


def test_guided_steer_shapes_and_errors():
    guide = _anisotropic_guide(10, 0)
    out = guided_steer_filters([3, 5], [guide[:4], guide[4:]], RngStream(0))
    assert [k.shape for k in out] == [(3, 9), (5, 9)]
    with pytest.raises(DimensionError):
        guided_steer_filters(3, [guide, np.ones((4, 4))], RngStream(0))
    with pytest.raises(DomainError):
        guided_steer_filters(3, [guide[:1]], RngStream(0))


def test_unchanged_methods():
    guide = _anisotropic_guide(6, 0).reshape(6, 3, 3).astype(np.float32)
    copied = generate_filters(FilterSpec('unchanged-guide', (3, 3), 6, guide=guide))
    assert np.array_equal(copied, guide)
    kernels = generate_filters(FilterSpec('unchanged-random', (3, 3), 100, fan_in=36))
    assert np.all(np.abs(kernels) <= np.sqrt(6 / 36) + 1e-7)


def test_init_method_values():
    assert InitMethod('guided-steer').requires_guide
    assert not InitMethod.PSINE.requires_guide
