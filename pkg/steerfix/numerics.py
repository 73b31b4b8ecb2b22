"""
Seeded sampling and small dense linear algebra used by every other module.

All public functions return ``float64`` arrays; consumers that store weights
cast to ``float32`` themselves. Randomness only ever comes from an explicit
:class:`RngStream`.
"""

from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
import scipy.linalg
from scipy.stats import gaussian_kde

from .errors import DimensionError, DomainError

KAIMING_NUMERATOR = 6.0

Size = Union[int, Tuple[int, ...]]


@dataclass
class RngStream:
    """
    Deterministic stream of random draws.

    Every draw call builds its generator from ``(seed, spawn_key, counter)``
    and then increments ``counter``, so the values of a call are a pure
    function of the seed and the number of calls made before it, whatever
    the thread schedule.

    Parameters
    ----------
    seed : int
        64-bit unsigned master seed.
    counter : int, optional
        Number of draw calls already made, by default 0.
    spawn_key : tuple of int, optional
        Derivation path of child streams, by default empty.
    """

    seed: int
    counter: int = 0
    spawn_key: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError(f"Seed must be a 64-bit unsigned integer, got {self.seed}")
        self.seed = int(self.seed)
        self.spawn_key = tuple(int(k) for k in self.spawn_key)

    def derive(self, *keys: int) -> 'RngStream':
        """Independent child stream, e.g. one per layer index."""
        return RngStream(self.seed, 0, self.spawn_key + tuple(keys))

    def generator(self) -> np.random.Generator:
        """Generator for the next draw call (advances the counter)."""
        sequence = np.random.SeedSequence(
            entropy=self.seed, spawn_key=self.spawn_key + (self.counter,)
        )
        self.counter += 1
        return np.random.Generator(np.random.PCG64(sequence))

    def uniform(self, low: float, high: float, size: Size) -> np.ndarray:
        return self.generator().uniform(low, high, size)

    def normal(self, loc: float, scale: float, size: Size) -> np.ndarray:
        return self.generator().normal(loc, scale, size)

    def integers(self, low: int, high: int, size: Size) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return self.generator().integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)

    def torch_seed(self) -> int:
        return int(self.generator().integers(0, 2**63 - 1))


def linspace(start: float, stop: float, count: int) -> np.ndarray:
    """
    Evenly spaced values from ``start`` to ``stop`` inclusive.

    Each value is computed from integer offsets as
    ``(start * (count-1-i) + stop * i) / (count-1)``, which makes the result
    exactly antisymmetric: ``linspace(a, b, n)[::-1] == -linspace(-b, -a, n)``.

    Parameters
    ----------
    start : float
        First value.
    stop : float
        Last value.
    count : int
        Number of values, at least 1. ``count == 1`` returns ``[start]``.

    Returns
    -------
    values : np.ndarray
        1-D array of length ``count``.
    """
    if count < 1:
        raise DomainError(f"linspace needs count >= 1, got {count}")
    if count == 1:
        return np.array([start], dtype=np.float64)
    i = np.arange(count, dtype=np.float64)
    values = (start * ((count - 1) - i) + stop * i) / (count - 1)
    values[0] = start
    values[-1] = stop
    return values


def sym_eig(A: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eigendecomposition of a symmetric matrix.

    The input is symmetrized as ``(A + A.T) / 2``. Eigenvalues are sorted in
    descending order and every eigenvector is signed so that its entry of
    largest magnitude is positive.

    Parameters
    ----------
    A : np.ndarray
        Square ``m x m`` matrix.

    Returns
    -------
    eigenvalues : np.ndarray
        Length ``m``, descending.
    eigenvectors : np.ndarray
        ``m x m`` with orthonormal columns, ``A V = V diag(eigenvalues)``.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"sym_eig expects a square matrix, got shape {A.shape}")
    symmetric = (A + A.T) / 2
    values, vectors = scipy.linalg.eigh(symmetric)
    order = np.argsort(-values, kind='stable')
    values = values[order]
    vectors = vectors[:, order]
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return values, vectors * signs


def scott_bandwidth(samples: np.ndarray) -> float:
    """Scott's rule ``std(ddof=1) * k**(-1/5)``; zero for fewer than two samples."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        return 0.0
    return float(np.std(x, ddof=1) * x.size ** (-1.0 / 5.0))


def kde_sample(samples: np.ndarray, n: int, rng: RngStream) -> np.ndarray:
    """
    Resample from a Gaussian kernel density estimate of ``samples``.

    Each output is a uniformly chosen input sample plus Gaussian noise whose
    standard deviation is Scott's bandwidth. Samples without spread behave as
    a point mass. Outputs are not clipped.

    Parameters
    ----------
    samples : np.ndarray
        Non-empty 1-D data.
    n : int
        Number of values to draw.
    rng : RngStream
        Source of randomness.

    Returns
    -------
    values : np.ndarray
        1-D array of length ``n``.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise DomainError("kde_sample needs at least one sample")
    if n < 0:
        raise DomainError(f"Cannot draw a negative number of samples ({n})")
    generator = rng.generator()
    scale = max(1.0, float(np.max(np.abs(x))))
    if x.size < 2 or np.std(x) <= 1e-12 * scale:
        return np.full(n, x[0] if np.all(x == x[0]) else float(np.mean(x)))
    kde = gaussian_kde(x, bw_method='scott')
    return kde.resample(n, seed=generator)[0]


def gaussian_sample(mean: float, variance: float, n: Size, rng: RngStream) -> np.ndarray:
    if variance < 0:
        raise DomainError(f"Variance must be non-negative, got {variance}")
    return rng.normal(mean, float(np.sqrt(variance)), n)


def kaiming_bound(fan_in: int) -> float:
    return float(np.sqrt(KAIMING_NUMERATOR / fan_in))


def kaiming_uniform(fan_in: int, n: Size, rng: RngStream) -> np.ndarray:
    """
    Kaiming uniform draws on ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``.

    Parameters
    ----------
    fan_in : int
        Number of inputs feeding one output unit.
    n : int or tuple of int
        Output size or shape.
    rng : RngStream
        Source of randomness.
    """
    if fan_in < 1:
        raise DomainError(f"fan_in must be >= 1, got {fan_in}")
    bound = kaiming_bound(fan_in)
    return rng.uniform(-bound, bound, n)
