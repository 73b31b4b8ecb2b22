"""
Energy spectra of spatial layers in the DCT-II basis, optionally saliency weighted.

For a layer with kernels ``F`` (one flattened kernel per row), basis ``B`` and
kernel weights ``w``:

- ``e_d = w @ |F B^T|``: energy per 2-D basis filter,
- ``e1``: every ``e_d[i] ** (1/d)`` added to the 1-D frequency slots of the
  factors of basis filter ``i``,
- ``e0``: mean of ``e1`` over the spatial dimensions (square kernels only).
"""

import csv
import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .engine import Batch, BatchSource, Executor
from .errors import DimensionError, DomainError, UnsupportedError
from .filterbank import Basis, dct2_basis
from .netgraph import NetworkGraph, spatial_layers
from .numerics import RngStream
from .svg import heatmap_svg
from .utils import PathLike, ensure_dir

logger = logging.getLogger(__name__)

SALIENCY_BATCHES = 15
SALIENCY_BATCH_SIZE = 4
SALIENCY_EPS = 1e-8


@dataclass
class EnergySpectrum:
    layer_id: str
    e_d: np.ndarray
    e1: np.ndarray
    e0: Optional[np.ndarray]
    basis: Basis
    weights_used: str

    @property
    def kernel_shape(self) -> Tuple[int, int]:
        return tuple(self.basis.sizes)

    @property
    def e_d_ranked(self) -> np.ndarray:
        """``e_d`` with basis filters in frequency order."""
        return self.e_d[self.basis.ranked_rows]


@dataclass
class SaliencyScores:
    """Non-negative score per spatial kernel, ``{layer id: (out, in per group)}``."""

    scores: Dict[str, np.ndarray]

    def layer(self, layer_id: str) -> np.ndarray:
        return self.scores[layer_id].reshape(-1)

    def flat(self) -> np.ndarray:
        """All scores in structural order (layer, out, in)."""
        if not self.scores:
            return np.zeros(0)
        return np.concatenate([s.reshape(-1) for s in self.scores.values()])

    def covers(self, net: NetworkGraph) -> bool:
        return all(
            node.id in self.scores
            and self.scores[node.id].shape == net.param(node.id, 'weight').shape[:2]
            for node in spatial_layers(net)
        )


def spectrum_ed(F: np.ndarray, basis: Basis, w: np.ndarray) -> np.ndarray:
    """
    Energy of every basis filter, ``e_d[i] = sum_j w_j |f_j . b_i|``.

    Parameters
    ----------
    F : np.ndarray
        ``(n, m)`` flattened kernels.
    basis : Basis
        Basis with ``m`` rows.
    w : np.ndarray
        ``(n,)`` non-negative kernel weights.

    Returns
    -------
    e_d : np.ndarray
        ``(m,)`` energies indexed by basis row.
    """
    F = np.asarray(F, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if F.ndim != 2 or F.shape[1] != basis.m:
        raise DimensionError(f"Kernels of shape {F.shape} do not match a basis of size {basis.m}")
    if w.shape[0] != F.shape[0]:
        raise DimensionError(f"Got {w.shape[0]} weights for {F.shape[0]} kernels")
    if np.any(w < 0):
        raise DomainError("Kernel weights must be non-negative")
    return w @ np.abs(F @ basis.matrix.T)


def backproject_e1(e_d: np.ndarray, basis: Basis) -> np.ndarray:
    """
    Attribute every 2-D energy to the 1-D frequencies of its factors.

    Slots ``0..h-1`` hold the height frequencies and ``h..h+w-1`` the width
    frequencies; each ``e_d[i]`` contributes ``e_d[i] ** (1/d)`` to one slot
    per dimension.
    """
    if basis.factor_index is None:
        raise DomainError("Basis has no factor index")
    e_d = np.asarray(e_d, dtype=np.float64)
    if e_d.shape != (basis.m,):
        raise DimensionError(f"e_d has shape {e_d.shape}, basis has {basis.m} rows")
    offsets = np.concatenate([[0], np.cumsum(basis.sizes)[:-1]])
    e1 = np.zeros(int(np.sum(basis.sizes)))
    root = e_d ** (1.0 / basis.dims)
    for dim in range(basis.dims):
        np.add.at(e1, offsets[dim] + basis.factor_index[:, dim], root)
    return e1


def reduce_e0(e1: np.ndarray, d: int, sizes: Sequence[int]) -> np.ndarray:
    """Average ``e1`` over the ``d`` dimensions of a square kernel."""
    sizes = tuple(int(s) for s in sizes)
    if len(set(sizes)) != 1:
        raise UnsupportedError(f"e0 is only defined for square kernels, got {sizes}")
    return np.asarray(e1, dtype=np.float64).reshape(d, sizes[0]).mean(axis=0)


def saliency_batches(
    source: BatchSource,
    rng: RngStream,
    num_batches: int = SALIENCY_BATCHES,
    batch_size: int = SALIENCY_BATCH_SIZE,
) -> List[Batch]:
    """The first ``num_batches`` shuffled minibatches of ``source``."""
    return list(itertools.islice(source.batches(batch_size, rng), num_batches))


def saliency(
    net: NetworkGraph, batches: Sequence[Batch], grad_only: bool = False
) -> SaliencyScores:
    """
    Gradient-times-weight saliency of every spatial kernel.

    For each minibatch the scored quantity is ``sum_i y_i * yhat_i / yhat_i'``
    with ``yhat = sigmoid(logits)`` and ``yhat'`` a detached copy, so each
    output contributes a gradient rescaled by its own confidence. The kernel
    score sums ``|grad * f|`` (``|grad|`` with ``grad_only``) over the
    kernel's entries and over minibatches.

    Parameters
    ----------
    net : NetworkGraph
        Network to score, evaluated in eval mode.
    batches : sequence of Batch
        Labeled minibatches.
    grad_only : bool, optional
        Drop the multiplication by the kernel, by default False.

    Returns
    -------
    scores : SaliencyScores
        One ``(out, in per group)`` array per spatial layer.
    """
    layers = spatial_layers(net)
    executor = Executor(net, dtype=torch.float64, training=False, track_fixed=True)
    weights = [executor.tensors[(node.id, 'weight')] for node in layers]
    totals = {node.id: np.zeros(w.shape[:2]) for node, w in zip(layers, weights)}
    for batch in batches:
        if not batch.labeled:
            raise DomainError("Saliency needs labeled batches")
        logits = executor(batch.inputs)
        probs = torch.sigmoid(logits)
        targets = torch.as_tensor(batch.targets, dtype=probs.dtype)
        scored = targets * probs / probs.detach().clamp_min(SALIENCY_EPS)
        if batch.mask is not None:
            scored = scored * torch.as_tensor(batch.mask, dtype=probs.dtype)
        grads = torch.autograd.grad(scored.sum(), weights, allow_unused=True)
        executor.reset()
        for node, weight, grad in zip(layers, weights, grads):
            if grad is None:
                continue
            term = grad if grad_only else grad * weight.detach()
            totals[node.id] += term.abs().sum(dim=(2, 3)).numpy()
    return SaliencyScores(totals)


def explain_network(
    net: NetworkGraph,
    basis: Optional[Basis] = None,
    saliency: Optional[SaliencyScores] = None,
) -> List[EnergySpectrum]:
    """
    Spectra of every spatial layer.

    Parameters
    ----------
    net : NetworkGraph
        Network to explain.
    basis : Basis, optional
        Basis to use for every layer; by default the DCT-II basis of each
        layer's kernel shape.
    saliency : SaliencyScores, optional
        Kernel weights; uniform ``1/n`` per layer when omitted.

    Returns
    -------
    spectra : list of EnergySpectrum
        One per spatial layer in node order.
    """
    layers = spatial_layers(net)
    if not layers:
        raise DomainError("Network has no spatial layers")
    spectra = []
    skipped = []
    for node in layers:
        weight = net.param(node.id, 'weight').tensor
        h, w = weight.shape[-2:]
        layer_basis = basis if basis is not None else dct2_basis(h, w)
        if tuple(layer_basis.sizes) != (h, w):
            raise DimensionError(f"Basis {layer_basis.sizes} does not fit layer '{node.id}'")
        F = weight.reshape(-1, h * w)
        if saliency is not None:
            weights, used = saliency.layer(node.id), 'saliency'
        else:
            weights, used = np.full(F.shape[0], 1.0 / F.shape[0]), 'uniform'
        e_d = spectrum_ed(F, layer_basis, weights)
        e1 = backproject_e1(e_d, layer_basis)
        e0 = None
        if h == w:
            e0 = reduce_e0(e1, layer_basis.dims, layer_basis.sizes)
        else:
            skipped.append(node.id)
        spectra.append(EnergySpectrum(node.id, e_d, e1, e0, layer_basis, used))
    if skipped:
        logger.warning(f"No e0 for non-square layers {skipped}")
    return spectra


def heatmap_matrix(
    spectra: Sequence[EnergySpectrum],
) -> Dict[Tuple[int, int], Tuple[np.ndarray, List[str]]]:
    """
    Heatmaps grouped by kernel shape.

    Returns
    -------
    groups : dict
        ``{(h, w): (matrix, layer ids)}`` where ``matrix[i, l]`` is the
        energy of the basis filter of frequency rank ``i`` in layer ``l``.
    """
    grouped: Dict[Tuple[int, int], List[EnergySpectrum]] = defaultdict(list)
    for s in spectra:
        grouped[s.kernel_shape].append(s)
    return {
        shape: (np.stack([s.e_d_ranked for s in group], axis=1), [s.layer_id for s in group])
        for shape, group in grouped.items()
    }


def write_reports(spectra: Sequence[EnergySpectrum], out_dir: PathLike) -> Dict[str, Path]:
    """
    Write ``spectra.csv``, ``e1.csv``, ``e0.csv``, ``bars.csv`` and ``heatmap.svg``.

    Basis filters are listed by frequency rank; column order is fixed.
    """
    out = ensure_dir(out_dir)
    paths = {name: out / name for name in ('spectra.csv', 'e1.csv', 'e0.csv', 'bars.csv')}

    with open(paths['spectra.csv'], 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['layer', 'kernel', 'basis_index', 'kh', 'kw', 'energy'])
        for s in spectra:
            rows = s.basis.ranked_rows
            for rank, row in enumerate(rows):
                kh, kw = s.basis.factor_index[row]
                writer.writerow(
                    [s.layer_id, _shape_label(s), rank, kh, kw, f'{s.e_d[row]:.10g}']
                )

    with open(paths['e1.csv'], 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['layer', 'dimension', 'frequency', 'energy'])
        for s in spectra:
            h = s.kernel_shape[0]
            for slot, value in enumerate(s.e1):
                dim, freq = ('h', slot) if slot < h else ('w', slot - h)
                writer.writerow([s.layer_id, dim, freq, f'{value:.10g}'])

    with open(paths['e0.csv'], 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['layer', 'frequency', 'energy'])
        for s in spectra:
            if s.e0 is not None:
                for freq, value in enumerate(s.e0):
                    writer.writerow([s.layer_id, freq, f'{value:.10g}'])

    groups = heatmap_matrix(spectra)
    with open(paths['bars.csv'], 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['kernel', 'axis', 'label', 'energy'])
        for (h, w), (matrix, layer_ids) in groups.items():
            for rank, value in enumerate(matrix.sum(axis=1)):
                writer.writerow([f'{h}x{w}', 'basis', rank, f'{value:.10g}'])
            for layer_id, value in zip(layer_ids, matrix.sum(axis=0)):
                writer.writerow([f'{h}x{w}', 'layer', layer_id, f'{value:.10g}'])

    panels = [
        (f'{h}x{w} kernels ({s[0].shape[1]} layers)', s[0], s[1])
        for (h, w), s in groups.items()
    ]
    paths['heatmap.svg'] = out / 'heatmap.svg'
    paths['heatmap.svg'].write_text(heatmap_svg(panels))
    logger.info(f"Wrote spectra of {len(spectra)} layers to {out}")
    return paths


def _shape_label(spectrum: EnergySpectrum) -> str:
    h, w = spectrum.kernel_shape
    return f'{h}x{w}'
