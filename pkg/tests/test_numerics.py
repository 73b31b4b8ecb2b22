import numpy as np
import pytest

from steerfix.errors import DimensionError, DomainError
from steerfix.numerics import (
    RngStream,
    gaussian_sample,
    kaiming_bound,
    kaiming_uniform,
    kde_sample,
    linspace,
    scott_bandwidth,
    sym_eig,
)


def _jacobi_eigenvalues(A, sweeps=50):
    """Cyclic Jacobi rotations, used as an independent oracle."""
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.triu(A, 1) ** 2))
        if off < 1e-14:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta**2 + 1)) if theta else 1.0
                c = 1 / np.sqrt(t**2 + 1)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
    return np.sort(np.diag(A))[::-1]


def test_linspace_endpoints_and_count():
    values = linspace(-1.5, 2.0, 8)
    assert len(values) == 8
    assert values[0] == -1.5 and values[-1] == 2.0
    assert np.allclose(np.diff(values), 0.5)


def test_linspace_is_exactly_antisymmetric():
    for a, b, n in [(0.0, np.pi, 3), (0.1, 0.7, 7), (-2.0, 5.0, 11)]:
        assert np.array_equal(linspace(a, b, n)[::-1], -linspace(-b, -a, n))


def test_linspace_single_value_and_invalid_count():
    assert np.array_equal(linspace(3.0, 7.0, 1), [3.0])
    with pytest.raises(DomainError):
        linspace(0.0, 1.0, 0)


def test_sym_eig_matches_jacobi():
    rng = np.random.default_rng(3)
    M = rng.normal(size=(6, 6))
    A = M + M.T
    values, vectors = sym_eig(A)
    assert np.all(np.diff(values) <= 0)
    assert np.allclose(values, _jacobi_eigenvalues(A), atol=1e-10)
    assert np.allclose(A @ vectors, vectors * values, atol=1e-10)
    assert np.allclose(vectors.T @ vectors, np.eye(6), atol=1e-12)


@pytest.mark.parametrize('n', [2, 9, 33, 64])
def test_sym_eig_reconstructs_the_matrix(n):
    M = np.random.default_rng(n).normal(size=(n, n))
    A = M + M.T
    values, vectors = sym_eig(A)
    residual = A - vectors @ np.diag(values) @ vectors.T
    assert np.abs(residual).sum(axis=1).max() < 1e-5 * np.abs(A).sum(axis=1).max()


def test_sym_eig_sign_convention():
    _, vectors = sym_eig(np.diag([1.0, 3.0, 2.0]))
    pivots = np.argmax(np.abs(vectors), axis=0)
    assert np.all(vectors[pivots, np.arange(3)] > 0)


def test_sym_eig_rejects_non_square():
    with pytest.raises(DimensionError):
        sym_eig(np.zeros((2, 3)))


def test_rng_stream_is_deterministic():
    a, b = RngStream(42), RngStream(42)
    assert np.array_equal(a.uniform(0, 1, 5), b.uniform(0, 1, 5))
    assert np.array_equal(a.normal(0, 1, 5), b.normal(0, 1, 5))
    assert a.counter == 2


def test_rng_stream_calls_and_children_differ():
    rng = RngStream(7)
    first, second = rng.uniform(0, 1, 4), rng.uniform(0, 1, 4)
    assert not np.array_equal(first, second)
    assert not np.array_equal(RngStream(7).derive(0).uniform(0, 1, 4), first)
    assert np.array_equal(RngStream(7).derive(3).uniform(0, 1, 4), rng.derive(3).uniform(0, 1, 4))


def test_rng_stream_rejects_negative_seed():
    with pytest.raises(DomainError):
        RngStream(-1)


def test_scott_bandwidth():
    x = np.arange(32, dtype=np.float64)
    assert scott_bandwidth(x) == pytest.approx(np.std(x, ddof=1) * 32 ** (-0.2))
    assert scott_bandwidth(np.array([1.0])) == 0.0


def test_kde_sample_matches_smoothed_moments():
    x = RngStream(1).normal(0.0, 1.0, 2000)
    bw = scott_bandwidth(x)
    y = kde_sample(x, 20000, RngStream(2))
    assert y.shape == (20000,)
    assert abs(y.mean() - x.mean()) < 0.05
    assert y.var() == pytest.approx(x.var() + bw**2, rel=0.1)


def test_kde_sample_point_mass_and_empty():
    assert np.array_equal(kde_sample(np.full(5, 0.25), 3, RngStream(0)), np.full(3, 0.25))
    with pytest.raises(DomainError):
        kde_sample(np.zeros(0), 3, RngStream(0))


def test_gaussian_sample_rejects_negative_variance():
    assert gaussian_sample(1.0, 0.0, 4, RngStream(0)).tolist() == [1.0] * 4
    with pytest.raises(DomainError):
        gaussian_sample(0.0, -1.0, 4, RngStream(0))


def test_kaiming_uniform_bounds():
    values = kaiming_uniform(18, 10000, RngStream(5))
    bound = kaiming_bound(18)
    assert bound == pytest.approx(np.sqrt(6 / 18))
    assert np.all(np.abs(values) <= bound)
    assert values.max() > 0.95 * bound and values.min() < -0.95 * bound
    with pytest.raises(DomainError):
        kaiming_uniform(0, 3, RngStream(0))
