"""
DCT-II basis construction and the fixed spatial filter initializers.

Filter banks are returned as ``float32`` arrays of shape ``(n, h, w)``.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.fft

from .errors import ConfigError, DimensionError, DomainError, UnsupportedError
from .numerics import RngStream, gaussian_sample, kaiming_uniform, kde_sample, linspace, sym_eig

logger = logging.getLogger(__name__)

GHAAR_TERMS = 3
PSINE_MAX_ORDER = 3
PSINE_FREQUENCY_RANGE = (1.0, 5.0)
_MAX_REDRAWS = 100


class InitMethod(str, Enum):
    ONES = 'ones'
    DCT2 = 'dct2'
    UNCHANGED_RANDOM = 'unchanged-random'
    UNCHANGED_GUIDE = 'unchanged-guide'
    GHAAR = 'ghaar'
    PSINE = 'psine'
    GUIDED_STEER = 'guided-steer'

    @property
    def requires_guide(self) -> bool:
        return self in (InitMethod.UNCHANGED_GUIDE, InitMethod.GUIDED_STEER)


@dataclass(frozen=True)
class Basis:
    """
    Orthonormal 2-D DCT-II basis with one flattened basis filter per row.

    Rows are stored in natural order (row ``a * w + b`` is built from the
    1-D factors ``a`` and ``b``); ``order[row]`` gives the frequency rank
    of a row, lowest frequency first.
    """

    sizes: Tuple[int, int]
    matrix: np.ndarray = field(compare=False)
    order: np.ndarray = field(compare=False)
    factor_index: np.ndarray = field(compare=False)

    @property
    def dims(self) -> int:
        return len(self.sizes)

    @property
    def m(self) -> int:
        return int(np.prod(self.sizes))

    @property
    def ranked_rows(self) -> np.ndarray:
        """Row indices sorted from lowest to highest frequency."""
        return np.argsort(self.order, kind='stable')

    def filter_at_rank(self, rank: int) -> np.ndarray:
        row = int(self.ranked_rows[rank])
        return self.matrix[row].reshape(self.sizes)


def dct_1d(n: int) -> np.ndarray:
    """Orthonormal 1-D DCT-II matrix, basis vector ``k`` in row ``k``."""
    return scipy.fft.dct(np.eye(n), type=2, norm='ortho', axis=0)


@lru_cache(maxsize=None)
def dct2_basis(h: int, w: int) -> Basis:
    """
    Build the separable 2-D DCT-II basis for ``h x w`` kernels.

    The 1-D factors are ``s * cos(pi / N * k * (x + 0.5))`` with
    ``s = sqrt(1/N)`` for ``k = 0`` and ``sqrt(2/N)`` otherwise. Frequency
    ranks sort rows by ``k_h + k_w`` and break ties by ``k_h``.

    Parameters
    ----------
    h : int
        Kernel height.
    w : int
        Kernel width.

    Returns
    -------
    basis : Basis
        Read-only basis object (cached per shape).
    """
    if h < 1 or w < 1:
        raise DomainError(f"Basis dimensions must be positive, got {h}x{w}")
    rows_h = dct_1d(h)
    rows_w = dct_1d(w)
    matrix = np.einsum('ai,bj->abij', rows_h, rows_w).reshape(h * w, h * w)
    kh, kw = np.divmod(np.arange(h * w), w)
    by_rank = np.lexsort((kh, kh + kw))
    order = np.empty(h * w, dtype=np.int64)
    order[by_rank] = np.arange(h * w)
    factor_index = np.stack([kh, kw], axis=1)
    for array in (matrix, order, factor_index):
        array.setflags(write=False)
    return Basis((h, w), matrix, order, factor_index)


@dataclass(frozen=True)
class FilterSpec:
    """
    What to generate for one spatial layer.

    Parameters
    ----------
    method : InitMethod
        Initialization method.
    kernel_shape : tuple of int
        ``(h, w)``.
    count : int
        Number of kernels ``n``.
    seed : int, optional
        Seed of the layer's random stream, by default 0.
    guide : np.ndarray, optional
        Guide kernels; required exactly for ``unchanged-guide`` and
        ``guided-steer``.
    fan_in : int, optional
        Fan-in for ``unchanged-random``; defaults to ``h * w``.
    distribution : str, optional
        GuidedSteer column distribution, ``'kde'`` (default) or ``'normal'``.
    centered : bool, optional
        Use the centered guide covariance for GuidedSteer, by default False.
    """

    method: InitMethod
    kernel_shape: Tuple[int, int]
    count: int
    seed: int = 0
    guide: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    fan_in: Optional[int] = None
    distribution: str = 'kde'
    centered: bool = False

    def __post_init__(self):
        try:
            method = InitMethod(self.method)
        except ValueError as e:
            raise ConfigError(f"Unknown initialization method {self.method!r}") from e
        object.__setattr__(self, 'method', method)
        object.__setattr__(self, 'kernel_shape', tuple(int(s) for s in self.kernel_shape))
        if self.count < 0:
            raise ConfigError(f"Filter count must be non-negative, got {self.count}")
        if method.requires_guide and self.guide is None:
            raise ConfigError(f"Method '{method.value}' requires guide kernels")
        if not method.requires_guide and self.guide is not None:
            raise ConfigError(f"Method '{method.value}' does not take guide kernels")
        if self.distribution not in ('kde', 'normal'):
            raise ConfigError(f"Unknown GuidedSteer distribution {self.distribution!r}")

    @property
    def m(self) -> int:
        return int(np.prod(self.kernel_shape))


def _square_size(spec: FilterSpec) -> int:
    h, w = spec.kernel_shape
    if h != w:
        raise UnsupportedError(f"{spec.method.value} generates square kernels only, got {h}x{w}")
    if h < 2:
        raise DomainError(f"{spec.method.value} needs kernels of at least 2x2, got {h}x{w}")
    return h


def _unit_norm(kernels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum('nij,nij->n', kernels, kernels))
    ok = norms > 1e-12
    safe = np.where(ok, norms, 1.0)
    return kernels / safe[:, None, None], ok


def _redraw_degenerate(sampler, n: int, rng: RngStream) -> np.ndarray:
    kernels, ok = sampler(n, rng)
    for _ in range(_MAX_REDRAWS):
        bad = np.flatnonzero(~ok)
        if bad.size == 0:
            break
        kernels[bad], ok[bad] = sampler(bad.size, rng)
    else:
        raise DomainError("Could not draw non-degenerate kernels")
    return kernels


def ones_filters(spec: FilterSpec) -> np.ndarray:
    """All-ones (box) kernels."""
    return np.ones((spec.count,) + spec.kernel_shape, dtype=np.float32)


def dct2_filters(spec: FilterSpec, basis: Basis, rng: RngStream) -> np.ndarray:
    """
    Pick basis filters uniformly with replacement.

    Parameters
    ----------
    spec : FilterSpec
        Layer spec; ``kernel_shape`` must equal ``basis.sizes``.
    basis : Basis
        DCT-II basis to draw from.
    rng : RngStream
        Source of randomness.

    Returns
    -------
    kernels : np.ndarray
        ``(n, h, w)`` kernels, each one row of the basis.
    """
    if tuple(basis.sizes) != spec.kernel_shape:
        raise DimensionError(
            f"Basis of size {basis.sizes} does not match kernel shape {spec.kernel_shape}"
        )
    rows = rng.integers(0, basis.m, spec.count)
    return basis.matrix[rows].reshape((spec.count,) + spec.kernel_shape).astype(np.float32)


def ghaar_kernel(
    m: int, row_freqs: Sequence[float], col_freqs: Sequence[float], weights: Sequence[float]
) -> np.ndarray:
    """
    Steered sum of separable sinusoids ``sum_t a_t cos(f_t x) cos(f'_t x)^T``.

    ``x = linspace(0, pi, m)``. The result is not normalized.
    """
    x = linspace(0.0, np.pi, m)
    g_row = np.cos(np.asarray(row_freqs, dtype=np.float64)[:, None] * x)
    g_col = np.cos(np.asarray(col_freqs, dtype=np.float64)[:, None] * x)
    return np.einsum('t,ti,tj->ij', np.asarray(weights, dtype=np.float64), g_row, g_col)


def ghaar_filters(spec: FilterSpec, rng: RngStream) -> np.ndarray:
    """
    Generalized Haar kernels.

    Each kernel steers three separable sinusoid outer products with standard
    normal weights. Row and column frequencies are drawn independently from
    ``U[0, 2(m-1)]``; kernels are scaled to unit Frobenius norm.
    """
    m = _square_size(spec)
    x = linspace(0.0, np.pi, m)
    top = 2.0 * (m - 1)

    def sampler(n, stream):
        f_row = stream.uniform(0.0, top, (n, GHAAR_TERMS))
        f_col = stream.uniform(0.0, top, (n, GHAAR_TERMS))
        alpha = stream.normal(0.0, 1.0, (n, GHAAR_TERMS))
        g_row = np.cos(f_row[..., None] * x)
        g_col = np.cos(f_col[..., None] * x)
        return _unit_norm(np.einsum('nt,nti,ntj->nij', alpha, g_row, g_col))

    return _redraw_degenerate(sampler, spec.count, rng).astype(np.float32)


@dataclass
class PsineTerms:
    """Random polynomial terms of a batch of Psine kernels (padded to the longest)."""

    lengths: np.ndarray
    powers: np.ndarray
    row_freqs: np.ndarray
    col_freqs: np.ndarray
    weights: np.ndarray

    @property
    def active(self) -> np.ndarray:
        return np.arange(self.powers.shape[1]) < self.lengths[:, None]


def sample_psine_terms(n: int, rng: RngStream) -> PsineTerms:
    """
    Draw polynomial orders, powers, frequencies and weights of ``n`` kernels.

    The maximal order ``P`` is uniform on ``{1, 2, 3}`` and ``l = 2P + 1``
    terms are used, so ``l >= 2 max(p) + 1`` always holds. When ``P >= 2``
    the powers contain both an even and an odd value.
    """
    slots = 2 * PSINE_MAX_ORDER + 1
    order = rng.integers(1, PSINE_MAX_ORDER + 1, n)
    lengths = 2 * order + 1
    powers = np.floor(rng.uniform(0.0, 1.0, (n, slots)) * order[:, None]).astype(np.int64) + 1
    active = np.arange(slots) < lengths[:, None]
    is_even = (powers % 2 == 0) & active
    is_odd = (powers % 2 == 1) & active
    mixed = order >= 2
    need_even = mixed & ~is_even.any(axis=1)
    need_odd = mixed & ~is_odd.any(axis=1)
    odd_choice = 1 + 2 * np.floor(rng.uniform(0.0, 1.0, n) * ((order + 1) // 2)).astype(np.int64)
    powers[need_even, 0] = 2
    powers[need_odd, 0] = odd_choice[need_odd]
    low, high = PSINE_FREQUENCY_RANGE
    row_freqs = rng.uniform(low, high, (n, slots))
    col_freqs = rng.uniform(low, high, (n, slots))
    weights = rng.normal(0.0, 1.0, (n, slots)) * active
    return PsineTerms(lengths, powers, row_freqs, col_freqs, weights)


def _psine_sum(
    m: int, row_freqs: np.ndarray, col_freqs: np.ndarray, powers: np.ndarray, weights: np.ndarray
) -> np.ndarray:
    x = linspace(0.0, np.pi, m)
    g_row = np.cos(row_freqs[..., None] * x)
    g_col = np.cos(col_freqs[..., None] * x)
    outer = g_row[..., :, None] * g_col[..., None, :]
    powered = outer ** powers[..., None, None]
    return np.sum(weights[..., None, None] * powered, axis=-3)


def _whiten(kernels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    centered = kernels - kernels.mean(axis=(-2, -1), keepdims=True)
    return _unit_norm(centered)


def psine_kernel(
    m: int,
    row_freqs: Sequence[float],
    col_freqs: Sequence[float],
    powers: Sequence[int],
    weights: Sequence[float],
) -> np.ndarray:
    """
    Whitened polynomial of sinusoid outer products.

    ``F = sum_i w_i (g(x_i) g(y_i)^T) ** p_i`` with element-wise powers,
    then shifted to zero mean and scaled to unit Frobenius norm.
    """
    kernel = _psine_sum(
        m,
        np.asarray(row_freqs, dtype=np.float64)[None],
        np.asarray(col_freqs, dtype=np.float64)[None],
        np.asarray(powers, dtype=np.int64)[None],
        np.asarray(weights, dtype=np.float64)[None],
    )
    whitened, ok = _whiten(kernel)
    if not ok[0]:
        raise DomainError("Psine kernel is constant and cannot be whitened")
    return whitened[0]


def psine_filters(spec: FilterSpec, rng: RngStream) -> np.ndarray:
    """Polynomial sinusoid kernels, whitened to zero mean and unit norm."""
    m = _square_size(spec)

    def sampler(n, stream):
        terms = sample_psine_terms(n, stream)
        raw = _psine_sum(m, terms.row_freqs, terms.col_freqs, terms.powers, terms.weights)
        return _whiten(raw)

    return _redraw_degenerate(sampler, spec.count, rng).astype(np.float32)


def guide_basis(G: np.ndarray, centered: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Basis that decorrelates the guide kernels.

    Parameters
    ----------
    G : np.ndarray
        ``(c, m)`` guide kernels, one flattened kernel per row.
    centered : bool, optional
        Subtract the mean kernel before forming the covariance.

    Returns
    -------
    B : np.ndarray
        ``(m, m)`` orthonormal basis, one basis filter per row (``V^T``).
    mean : np.ndarray
        Mean kernel that was subtracted (zeros when not centered).
    """
    G = np.asarray(G, dtype=np.float64)
    mean = G.mean(axis=0) if centered else np.zeros(G.shape[1])
    centered_G = G - mean
    _, V = sym_eig(centered_G.T @ centered_G)
    return V.T, mean


def _sample_column(column: np.ndarray, n: int, rng: RngStream, distribution: str) -> np.ndarray:
    if distribution == 'normal':
        return gaussian_sample(float(column.mean()), float(column.var()), n, rng)
    return kde_sample(column, n, rng)


def guided_steer_filters(
    n: Union[int, Sequence[int]],
    layer_guides: Sequence[np.ndarray],
    rng: RngStream,
    distribution: str = 'kde',
    centered: bool = False,
) -> List[np.ndarray]:
    """
    Layer-wise GuidedSteer.

    The basis comes from the eigendecomposition of the covariance of all guide
    kernels; the steering-weight distribution of every basis column is fitted
    per layer and resampled independently.

    Parameters
    ----------
    n : int or sequence of int
        Number of kernels to generate, shared or per layer.
    layer_guides : sequence of np.ndarray
        Guide kernels of every layer, each reshaped to ``(c_l, m)``.
    rng : RngStream
        Source of randomness; layer ``l`` uses ``rng.derive(l)``.
    distribution : str, optional
        ``'kde'`` (default) or ``'normal'``.
    centered : bool, optional
        Centered covariance, by default False.

    Returns
    -------
    kernels : list of np.ndarray
        One ``(n_l, m)`` float32 array per layer.
    """
    guides = [np.asarray(g, dtype=np.float64).reshape(len(g), -1) for g in layer_guides]
    if not guides:
        raise DomainError("GuidedSteer needs at least one guide layer")
    sizes = {g.shape[1] for g in guides}
    if len(sizes) != 1:
        raise DimensionError(f"Guide layers have different kernel sizes: {sorted(sizes)}")
    counts = [int(n)] * len(guides) if np.isscalar(n) else [int(c) for c in n]
    if len(counts) != len(guides):
        raise DimensionError(f"Got {len(counts)} counts for {len(guides)} guide layers")
    G = np.vstack(guides)
    if G.shape[0] < 2:
        raise DomainError("GuidedSteer needs at least two guide kernels in total")
    if any(g.shape[0] == 0 for g in guides):
        raise DomainError("Every guide layer needs at least one kernel")

    B, mean = guide_basis(G, centered)
    m = G.shape[1]
    generated = []
    for layer, (guide, count) in enumerate(zip(guides, counts)):
        stream = rng.derive(layer)
        steering = (guide - mean) @ B.T
        W = np.empty((count, m))
        for i in range(m):
            W[:, i] = _sample_column(steering[:, i], count, stream, distribution)
        generated.append((W @ B + mean).astype(np.float32))
        logger.debug(f"GuidedSteer layer {layer}: {count} kernels from {guide.shape[0]} guides")
    return generated


def unchanged_filters(spec: FilterSpec, rng: Optional[RngStream] = None) -> np.ndarray:
    """
    Kernels of a never-trained network, or the guide kernels unchanged.

    ``unchanged-random`` draws Kaiming uniform values with ``spec.fan_in``
    (default ``h * w``); ``unchanged-guide`` returns a copy of the guide.
    """
    if spec.method is InitMethod.UNCHANGED_GUIDE:
        if spec.guide is None:
            raise ConfigError("unchanged-guide requires guide kernels")
        return np.array(spec.guide, dtype=np.float32, copy=True)
    if spec.method is not InitMethod.UNCHANGED_RANDOM:
        raise ConfigError(f"unchanged_filters cannot generate '{spec.method.value}'")
    rng = rng if rng is not None else RngStream(spec.seed)
    fan_in = spec.fan_in if spec.fan_in is not None else spec.m
    shape = (spec.count,) + spec.kernel_shape
    return kaiming_uniform(fan_in, shape, rng).astype(np.float32)


def generate_filters(spec: FilterSpec, rng: Optional[RngStream] = None) -> np.ndarray:
    """
    Generate the kernels described by ``spec``.

    Parameters
    ----------
    spec : FilterSpec
        What to generate.
    rng : RngStream, optional
        Source of randomness, by default ``RngStream(spec.seed)``.

    Returns
    -------
    kernels : np.ndarray
        ``(n, h, w)`` float32 kernels (the guide's own shape for
        ``unchanged-guide``).
    """
    rng = rng if rng is not None else RngStream(spec.seed)
    method = spec.method
    if method is InitMethod.ONES:
        return ones_filters(spec)
    if method is InitMethod.DCT2:
        return dct2_filters(spec, dct2_basis(*spec.kernel_shape), rng)
    if method is InitMethod.GHAAR:
        return ghaar_filters(spec, rng)
    if method is InitMethod.PSINE:
        return psine_filters(spec, rng)
    if method in (InitMethod.UNCHANGED_RANDOM, InitMethod.UNCHANGED_GUIDE):
        return unchanged_filters(spec, rng)
    guide = np.asarray(spec.guide).reshape(-1, spec.m)
    kernels = guided_steer_filters(
        [spec.count], [guide], rng, distribution=spec.distribution, centered=spec.centered
    )[0]
    return kernels.reshape((spec.count,) + spec.kernel_shape)
