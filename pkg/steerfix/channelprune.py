"""
Saliency-driven kernel zeroing and channel pruning.

Pruning works on channels of node outputs. Channels that must disappear
together (through BatchNorm, activations, upsampling, pooling, concat offsets,
add and fusion joins, and the groups of grouped convolutions) form one
component. A component is removed only when

- it contains neither a graph input nor a graph output,
- every pointwise, linear or dense (``groups == 1``) convolution reading one of
  its channels either reads a channel that is structurally zero or has an
  all-zero weight slice for it, and
- removing it leaves every tensor with at least one channel.

BatchNorm is treated as zero preserving, which is exact for layers whose
shift and running mean are zero (freshly initialized networks).
"""

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from .engine import BatchSource, Executor, evaluate
from .errors import DimensionError, DomainError
from .explainsteer import SaliencyScores
from .netgraph import (
    LayerKind,
    LayerNode,
    NetworkGraph,
    ParamTensor,
    spatial_layers,
    validate_graph,
)
from .numerics import RngStream, gaussian_sample, kaiming_uniform

logger = logging.getLogger(__name__)

ZeroMask = Dict[str, np.ndarray]
Channel = Tuple[str, int]

PASS_THROUGH = (
    LayerKind.BATCH_NORM,
    LayerKind.ACTIVATION,
    LayerKind.BILINEAR_UPSAMPLE,
    LayerKind.GLOBAL_AVG_POOL,
)
JOINS = (LayerKind.ADD, LayerKind.SCALAR_FUSION)


def zero_mask(net: NetworkGraph) -> ZeroMask:
    """``{layer id: (out, in per group) bool}``, True where a spatial kernel is all zero."""
    return {
        node.id: np.all(net.param(node.id, 'weight').tensor == 0, axis=(2, 3))
        for node in spatial_layers(net)
    }


def zero_kernels(
    net: NetworkGraph, scores: SaliencyScores, fraction: float, most_salient: bool = False
) -> Tuple[NetworkGraph, ZeroMask]:
    """
    Set ``floor(fraction * K)`` spatial kernels to exact zero.

    Kernels are taken in increasing score order (decreasing with
    ``most_salient``) over the whole network; ties are broken by the
    structural index ``(layer, out, in)``.

    Parameters
    ----------
    net : NetworkGraph
        Network to zero.
    scores : SaliencyScores
        Scores of every spatial kernel.
    fraction : float
        Fraction of kernels to zero, in ``[0, 1]``.
    most_salient : bool, optional
        Zero the highest-scored kernels instead, by default False.

    Returns
    -------
    net : NetworkGraph
        Network with zeroed kernels.
    mask : ZeroMask
        Fully-zero kernels of the result.
    """
    if not 0.0 <= fraction <= 1.0:
        raise DomainError(f"fraction must lie in [0, 1], got {fraction}")
    if not scores.covers(net):
        raise DomainError("Saliency scores do not cover every spatial kernel")
    layers = spatial_layers(net)
    flat = np.concatenate([scores.layer(node.id) for node in layers]).astype(np.float64)
    total = flat.size
    k = int(math.floor(fraction * total + 1e-9))
    position = np.arange(total)
    order = np.lexsort((position, -flat if most_salient else flat))
    chosen = np.zeros(total, dtype=bool)
    chosen[order[:k]] = True

    updated = []
    start = 0
    for node in layers:
        weight = net.param(node.id, 'weight')
        count = weight.shape[0] * weight.shape[1]
        hit = chosen[start:start + count].reshape(weight.shape[:2])
        start += count
        if hit.any():
            tensor = weight.tensor.copy()
            tensor[hit] = 0.0
            updated.append(weight.replace(tensor=tensor))
    zeroed = net.with_params(updated)
    logger.info(
        f"Zeroed {k} of {total} spatial kernels "
        f"({'most' if most_salient else 'least'} salient first)"
    )
    return zeroed, zero_mask(zeroed)


def zero_least_salient(
    net: NetworkGraph, scores: SaliencyScores, fraction: float
) -> Tuple[NetworkGraph, ZeroMask]:
    return zero_kernels(net, scores, fraction, most_salient=False)


def structural_zeros(net: NetworkGraph) -> Dict[str, np.ndarray]:
    """Per node, which output channels are zero for every input."""
    channels = net.out_channels
    zeros: Dict[str, np.ndarray] = {}
    for node_id in net.topological_order:
        node = net.node(node_id)
        preds = [zeros[p] for p in net.predecessors(node_id)]
        kind = node.kind
        if kind is LayerKind.INPUT:
            z = np.zeros(channels[node_id], dtype=bool)
        elif node.is_conv or kind is LayerKind.LINEAR:
            weight = net.param(node_id, 'weight').tensor
            w_zero = weight == 0 if weight.ndim == 2 else np.all(weight == 0, axis=(2, 3))
            groups = node.groups
            out_ch, ipg = w_zero.shape
            reads = preds[0].reshape(groups, ipg)[np.arange(out_ch) // (out_ch // groups)]
            z = np.all(w_zero | reads, axis=1)
            params = net.params_of(node_id)
            if 'bias' in params:
                z &= params['bias'].tensor == 0
        elif kind is LayerKind.ACTIVATION and node.attrs['fn'] == 'sigmoid':
            z = np.zeros(channels[node_id], dtype=bool)
        elif kind in PASS_THROUGH:
            z = preds[0].copy()
        elif kind in JOINS:
            z = np.logical_and.reduce(preds)
        elif kind is LayerKind.CONCAT:
            z = np.concatenate(preds)
        else:
            z = np.zeros(channels[node_id], dtype=bool)
        zeros[node_id] = z
    return zeros


class _UnionFind:
    def __init__(self):
        self.parent: Dict[Channel, Channel] = {}

    def add(self, item: Channel) -> None:
        self.parent.setdefault(item, item)

    def find(self, item: Channel) -> Channel:
        root = item
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[item] != root:
            self.parent[item], item = root, self.parent[item]
        return root

    def union(self, a: Channel, b: Channel) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


@dataclass
class RemovalPlan:
    """
    Channels to remove, as output channel indices of every node in the
    original graph's numbering.
    """

    removed: Dict[str, Tuple[int, ...]]
    warnings: List[str] = field(default_factory=list)

    def outputs(self, node_id: Optional[str]) -> Tuple[int, ...]:
        return self.removed.get(node_id, ()) if node_id is not None else ()

    @property
    def empty(self) -> bool:
        return not any(self.removed.values())


def _conv_groups(node: LayerNode) -> Tuple[int, int, int]:
    groups = node.groups
    return groups, node.attrs['in_channels'] // groups, node.attrs['out_channels'] // groups


def plan_channel_removal(net: NetworkGraph, mask: ZeroMask) -> RemovalPlan:
    """
    Decide which channels can be removed given the zeroed spatial kernels.

    Seeds are the fully-zero rows (outputs) and columns (inputs) of every
    dense spatial convolution and the fully-zero groups of grouped ones.
    Seeds whose component cannot be removed are kept and reported.
    """
    channels = net.out_channels
    zeros = structural_zeros(net)
    uf = _UnionFind()
    reads: Dict[Channel, List[Tuple[str, bool]]] = defaultdict(list)

    for node_id in net.topological_order:
        for c in range(channels[node_id]):
            uf.add((node_id, c))
    for node_id in net.topological_order:
        node = net.node(node_id)
        preds = net.predecessors(node_id)
        kind = node.kind
        if kind in PASS_THROUGH:
            for c in range(channels[node_id]):
                uf.union((preds[0], c), (node_id, c))
        elif kind in JOINS:
            for p in preds:
                for c in range(channels[node_id]):
                    uf.union((p, c), (node_id, c))
        elif kind is LayerKind.CONCAT:
            offset = 0
            for p in preds:
                for c in range(channels[p]):
                    uf.union((p, c), (node_id, offset + c))
                offset += channels[p]
        elif node.is_conv and node.groups > 1:
            groups, ipg, opg = _conv_groups(node)
            for g in range(groups):
                anchor = (node_id, g * opg)
                for j in range(opg):
                    uf.union(anchor, (node_id, g * opg + j))
                for i in range(ipg):
                    uf.union(anchor, (preds[0], g * ipg + i))
        elif node.is_conv or kind is LayerKind.LINEAR:
            weight = net.param(node_id, 'weight').tensor
            flat = weight.reshape(weight.shape[0], weight.shape[1], -1)
            column_zero = np.all(flat == 0, axis=(0, 2))
            for i, is_zero in enumerate(column_zero):
                reads[(preds[0], i)].append((node_id, bool(is_zero)))

    blocked: Dict[Channel, str] = {}
    for node_id in tuple(net.inputs) + tuple(net.outputs):
        for c in range(channels[node_id]):
            blocked.setdefault(uf.find((node_id, c)), f"reaches graph input/output '{node_id}'")
    for (node_id, c), consumers in reads.items():
        if zeros[node_id][c]:
            continue
        for consumer, is_zero in consumers:
            if not is_zero:
                blocked.setdefault(
                    uf.find((node_id, c)), f"is read by '{consumer}' with nonzero weights"
                )

    seeds: Dict[Channel, Channel] = {}
    for node in spatial_layers(net):
        layer_mask = np.asarray(mask.get(node.id, ()), dtype=bool)
        if layer_mask.size == 0:
            continue
        src = net.predecessors(node.id)[0]
        groups, _, opg = _conv_groups(node)
        if groups == 1:
            for o in np.flatnonzero(layer_mask.all(axis=1)):
                seeds.setdefault(uf.find((node.id, int(o))), (node.id, int(o)))
            for i in np.flatnonzero(layer_mask.all(axis=0)):
                seeds.setdefault(uf.find((src, int(i))), (src, int(i)))
        else:
            per_group = layer_mask.reshape(groups, opg, -1).all(axis=(1, 2))
            for g in np.flatnonzero(per_group):
                seeds.setdefault(uf.find((node.id, int(g) * opg)), (node.id, int(g) * opg))

    members: Dict[Channel, List[Channel]] = defaultdict(list)
    for item in uf.parent:
        members[uf.find(item)].append(item)

    removable = {root for root in seeds if root not in blocked}
    while True:
        removed: Dict[str, List[int]] = defaultdict(list)
        for root in removable:
            for node_id, c in members[root]:
                removed[node_id].append(c)
        emptied = [n for n, cs in removed.items() if len(cs) >= channels[n]]
        if not emptied:
            break
        for node_id in emptied:
            for c in range(channels[node_id]):
                root = uf.find((node_id, c))
                if root in removable:
                    removable.discard(root)
                    blocked[root] = f"would remove every channel of '{node_id}'"

    warnings = []
    for root, (node_id, c) in sorted(seeds.items(), key=lambda kv: kv[1]):
        if root in removable:
            continue
        joins = sorted({n for n, _ in members[root] if net.node(n).kind in JOINS})
        where = f" across joins {joins}" if joins else ""
        warnings.append(f"kept channel {c} of '{node_id}'{where}: component {blocked[root]}")
    for message in warnings:
        logger.warning(message)
    return RemovalPlan({n: tuple(sorted(cs)) for n, cs in removed.items()}, warnings)


def _keep(count: int, removed: Sequence[int]) -> np.ndarray:
    keep = np.ones(count, dtype=bool)
    keep[list(removed)] = False
    return np.flatnonzero(keep)


def _slice_node(
    net: NetworkGraph, node: LayerNode, plan: RemovalPlan
) -> Tuple[LayerNode, List[ParamTensor], Dict[str, List[int]]]:
    """Node and parameters with the planned channels removed."""
    params = net.params_of(node.id)
    preds = net.predecessors(node.id)
    out_rm = plan.outputs(node.id)
    in_rm = plan.outputs(preds[0]) if preds else ()
    change = {'removed_inputs': list(in_rm), 'removed_outputs': list(out_rm)}
    if not out_rm and not in_rm:
        return node, list(params.values()), change

    sliced: Dict[str, np.ndarray] = {}
    if node.is_conv:
        weight = params['weight'].tensor
        groups, ipg, opg = _conv_groups(node)
        if groups == 1:
            rows = _keep(weight.shape[0], out_rm)
            cols = _keep(weight.shape[1], in_rm)
            sliced['weight'] = weight[rows][:, cols]
            node = node.with_attrs(in_channels=len(cols), out_channels=len(rows))
        else:
            dropped = sorted({c // opg for c in out_rm})
            kept = _keep(groups, dropped)
            rows = (kept[:, None] * opg + np.arange(opg)).ravel()
            sliced['weight'] = weight[rows]
            node = node.with_attrs(
                groups=len(kept), in_channels=len(kept) * ipg, out_channels=len(kept) * opg
            )
            change['removed_groups'] = dropped
        if 'bias' in params:
            sliced['bias'] = params['bias'].tensor[rows]
    elif node.kind is LayerKind.BATCH_NORM:
        keep = _keep(node.attrs['channels'], out_rm)
        sliced = {name: p.tensor[keep] for name, p in params.items()}
        node = node.with_attrs(channels=len(keep))
    elif node.kind is LayerKind.LINEAR:
        weight = params['weight'].tensor
        rows = _keep(weight.shape[0], out_rm)
        cols = _keep(weight.shape[1], in_rm)
        sliced = {'weight': weight[rows][:, cols], 'bias': params['bias'].tensor[rows]}
        node = node.with_attrs(in_features=len(cols), out_features=len(rows))
    updated = [
        p.replace(tensor=sliced[name]) if name in sliced else p for name, p in params.items()
    ]
    return node, updated, change


def _apply_slices(
    net: NetworkGraph, plan: RemovalPlan, select: Callable[[LayerNode], bool]
) -> NetworkGraph:
    nodes = []
    params: Dict[Tuple[str, str], ParamTensor] = {}
    for node in net.nodes:
        if select(node):
            node, updated, _ = _slice_node(net, node, plan)
            params.update({p.key: p for p in updated})
        nodes.append(node)
    return net.replace(nodes=nodes, params=tuple(params.get(p.key, p) for p in net.params))


@dataclass
class PruneReport:
    """
    Zeroed-versus-pruned accounting of one pruning run.

    ``fraction_spatial_zeroed`` is the share of spatial weights that were zero
    before pruning; ``fraction_params_pruned`` the share of all parameters
    (BatchNorm buffers excluded) that pruning removed.
    """

    fraction_spatial_zeroed: float
    fraction_params_pruned: float
    params_before: int
    params_after: int
    layers: Dict[str, Dict[str, List[int]]]
    neighbors: Dict[str, Dict[str, List[int]]]
    removed_params: Dict[str, int]
    warnings: List[str]
    plan: RemovalPlan = field(repr=False)

    def reconciles(self) -> bool:
        return self.params_before - self.params_after == sum(self.removed_params.values())

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop('plan')
        data['percent_spatial_zeroed'] = round(100.0 * self.fraction_spatial_zeroed, 4)
        data['percent_params_pruned'] = round(100.0 * self.fraction_params_pruned, 4)
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + '\n'


def _spatial_zero_fraction(net: NetworkGraph, mask: ZeroMask) -> float:
    zeroed = total = 0
    for node in spatial_layers(net):
        weight = net.param(node.id, 'weight')
        h, w = weight.shape[-2:]
        total += weight.size
        zeroed += int(np.asarray(mask.get(node.id, np.zeros(0)), dtype=bool).sum()) * h * w
    return zeroed / total if total else 0.0


def prune_zero_channels(net: NetworkGraph, mask: ZeroMask) -> Tuple[NetworkGraph, PruneReport]:
    """
    Remove fully-zero rows, columns and groups from the spatial convolutions.

    Only the spatial layers are changed here, so the result is generally
    inconsistent with its neighbors until :func:`repair_graph` runs with
    ``report.plan``. The report accounts for the whole removal.
    """
    for node in spatial_layers(net):
        expected = net.param(node.id, 'weight').shape[:2]
        if node.id in mask and np.shape(mask[node.id]) != expected:
            raise DimensionError(
                f"Mask of '{node.id}' has shape {np.shape(mask[node.id])}, expected {expected}"
            )
    plan = plan_channel_removal(net, mask)
    layers, neighbors, removed_params = {}, {}, {}
    for node in net.nodes:
        new_node, updated, change = _slice_node(net, node, plan)
        if not change['removed_inputs'] and not change['removed_outputs']:
            continue
        before = sum(p.size for p in net.params_of(node.id).values() if not p.buffer)
        after = sum(p.size for p in updated if not p.buffer)
        removed_params[node.id] = before - after
        (layers if node.is_spatial else neighbors)[node.id] = change

    params_before = net.num_parameters()
    params_after = params_before - sum(removed_params.values())
    report = PruneReport(
        fraction_spatial_zeroed=_spatial_zero_fraction(net, mask),
        fraction_params_pruned=(
            (params_before - params_after) / params_before if params_before else 0.0
        ),
        params_before=params_before,
        params_after=params_after,
        layers=layers,
        neighbors=neighbors,
        removed_params=removed_params,
        warnings=list(plan.warnings),
        plan=plan,
    )
    pruned = _apply_slices(net, plan, lambda n: n.is_spatial)
    if not plan.empty:
        logger.debug("Spatial layers pruned; graph is inconsistent until repaired")
    return pruned, report


def repair_graph(net: NetworkGraph, plan: RemovalPlan) -> NetworkGraph:
    """
    Propagate a removal plan to the neighbors of the pruned spatial layers.

    BatchNorm layers drop the matching slots of scale, shift and running
    statistics; pointwise convolutions and linear layers drop matching input
    and output slices; grouped convolutions drop whole groups. Concat and join
    nodes need no change because their channel counts are derived.
    """
    repaired = _apply_slices(net, plan, lambda n: not n.is_spatial)
    if not plan.empty:
        repaired = repaired.with_meta(pruned=True)
    return validate_graph(repaired)


def fill_zero(
    net: NetworkGraph, rng: RngStream, nonzero_stats: bool = False
) -> NetworkGraph:
    """
    Re-initialize zeros that survived pruning.

    All-zero kernels get Kaiming uniform values (fan-in of the layer).
    Kernels with some zero entries have only those entries replaced by draws
    from a normal distribution with the kernel's mean and variance, computed
    over all entries (over the nonzero entries with ``nonzero_stats``).
    Every spatial kernel is marked fixed.
    """
    updated = []
    for index, node in enumerate(spatial_layers(net)):
        weight = net.param(node.id, 'weight')
        out_ch, ipg, h, w = weight.shape
        stream = rng.derive(index)
        kernels = weight.tensor.reshape(-1, h * w).astype(np.float64)
        is_zero = kernels == 0
        full = is_zero.all(axis=1)
        partial = is_zero.any(axis=1) & ~full
        if full.any():
            kernels[full] = kaiming_uniform(ipg * h * w, (int(full.sum()), h * w), stream)
        for k in np.flatnonzero(partial):
            values = kernels[k][~is_zero[k]] if nonzero_stats else kernels[k]
            count = int(is_zero[k].sum())
            draws = gaussian_sample(float(values.mean()), float(values.var()), count, stream)
            kernels[k][is_zero[k]] = draws
        if full.any() or partial.any():
            logger.debug(
                f"{node.id}: refilled {int(full.sum())} zero "
                f"and {int(partial.sum())} partial kernels"
            )
        updated.append(weight.replace(tensor=kernels.reshape(weight.shape), fixed=True))
    return net.with_params(updated)


def channel_prune(
    net: NetworkGraph,
    scores: SaliencyScores,
    fraction: float,
    rng: RngStream,
    fill: bool = True,
) -> Tuple[NetworkGraph, PruneReport]:
    """
    Zero the least salient kernels, remove zero channels, repair and refill.

    Parameters
    ----------
    net : NetworkGraph
        Network to prune.
    scores : SaliencyScores
        Kernel saliency, e.g. from :func:`steerfix.explainsteer.saliency`.
    fraction : float
        Fraction of spatial kernels to zero.
    rng : RngStream
        Stream for FillZero.
    fill : bool, optional
        Run FillZero, by default True.

    Returns
    -------
    net : NetworkGraph
        Pruned network.
    report : PruneReport
        Accounting of the run.
    """
    zeroed, mask = zero_least_salient(net, scores, fraction)
    pruned, report = prune_zero_channels(zeroed, mask)
    repaired = repair_graph(pruned, report.plan)
    if fill:
        repaired = fill_zero(repaired, rng)
    logger.info(
        f"Zeroed {100 * report.fraction_spatial_zeroed:.1f}% of spatial weights, pruned "
        f"{100 * report.fraction_params_pruned:.1f}% of parameters "
        f"({report.params_before} -> {report.params_after})"
    )
    return repaired, report


def prune_equivalence_check(
    net_zeroed: NetworkGraph, net_pruned: NetworkGraph, probe_inputs: np.ndarray
) -> float:
    """Largest absolute output difference of two networks on the probes (float64, eval mode)."""
    outputs = []
    for net in (net_zeroed, net_pruned):
        executor = Executor(net, dtype=torch.float64, training=False, track_fixed=False)
        with torch.no_grad():
            outputs.append(executor(probe_inputs).numpy())
    if outputs[0].shape != outputs[1].shape:
        raise DimensionError(f"Output shapes differ: {outputs[0].shape} vs {outputs[1].shape}")
    return float(np.max(np.abs(outputs[0] - outputs[1]))) if outputs[0].size else 0.0


def zero_sweep(
    net: NetworkGraph,
    scores: SaliencyScores,
    fractions: Sequence[float],
    source: BatchSource,
    most_salient_first: bool = False,
) -> List[Tuple[float, float]]:
    """Metric of ``net`` after zeroing each fraction of kernels, ``[(fraction, metric)]``."""
    curve = []
    for fraction in tqdm(fractions, desc='zero-sweep'):
        zeroed, _ = zero_kernels(net, scores, float(fraction), most_salient=most_salient_first)
        curve.append((float(fraction), evaluate(zeroed, source).metric))
    return curve
