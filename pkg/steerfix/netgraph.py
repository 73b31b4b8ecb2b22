"""
Directed-graph representation of convolutional networks.

A :class:`NetworkGraph` is immutable: every transformation (initialization,
zeroing, pruning, training) returns a new graph. Edges are ordered; the order
of a node's incoming edges is the order of its operands (``concat`` layout,
``scalar_fusion`` weights).
"""

import dataclasses
import graphlib
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from types import MappingProxyType
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DimensionError, GraphError
from .filterbank import FilterSpec, InitMethod, generate_filters, guided_steer_filters
from .numerics import RngStream

logger = logging.getLogger(__name__)

ACTIVATIONS = ('celu', 'relu', 'sigmoid')


class LayerKind(str, Enum):
    INPUT = 'input'
    CONV2D = 'conv2d'
    POINTWISE_CONV = 'pointwise_conv'
    BATCH_NORM = 'batch_norm'
    LINEAR = 'linear'
    ACTIVATION = 'activation'
    ADD = 'add'
    CONCAT = 'concat'
    BILINEAR_UPSAMPLE = 'bilinear_upsample'
    GLOBAL_AVG_POOL = 'global_avg_pool'
    SCALAR_FUSION = 'scalar_fusion'


UNARY_KINDS = (
    LayerKind.CONV2D,
    LayerKind.POINTWISE_CONV,
    LayerKind.BATCH_NORM,
    LayerKind.LINEAR,
    LayerKind.ACTIVATION,
    LayerKind.BILINEAR_UPSAMPLE,
    LayerKind.GLOBAL_AVG_POOL,
)


def _freeze(value):
    if isinstance(value, (list, tuple)):
        return tuple(_freeze(v) for v in value)
    if isinstance(value, np.integer):
        return int(value)
    return value


@dataclass(frozen=True)
class LayerNode:
    """
    One layer of a network.

    Attributes by kind
    ------------------
    input : ``channels``
    conv2d : ``in_channels``, ``out_channels``, ``kernel`` (h, w), ``stride``,
        ``padding`` (h, w), ``groups``, ``bias``
    pointwise_conv : ``in_channels``, ``out_channels``, ``stride``, ``bias``
    batch_norm : ``channels``
    linear : ``in_features``, ``out_features``
    activation : ``fn`` (``celu``, ``relu`` or ``sigmoid``)
    bilinear_upsample : ``scale``
    scalar_fusion : ``count``
    """

    id: str
    kind: LayerKind
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        try:
            kind = LayerKind(self.kind)
        except ValueError as e:
            raise GraphError(
                'unknown_kind', f"Node '{self.id}' has unknown kind {self.kind!r}"
            ) from e
        object.__setattr__(self, 'kind', kind)
        attrs = {k: _freeze(v) for k, v in dict(self.attrs).items()}
        object.__setattr__(self, 'attrs', MappingProxyType(attrs))

    def __hash__(self):
        return hash((self.id, self.kind))

    def __eq__(self, other):
        if not isinstance(other, LayerNode):
            return NotImplemented
        return (self.id, self.kind, dict(self.attrs)) == (other.id, other.kind, dict(other.attrs))

    @property
    def is_conv(self) -> bool:
        return self.kind in (LayerKind.CONV2D, LayerKind.POINTWISE_CONV)

    @property
    def kernel(self) -> Tuple[int, int]:
        if self.kind is LayerKind.CONV2D:
            return tuple(self.attrs['kernel'])
        return (1, 1)

    @property
    def groups(self) -> int:
        return int(self.attrs.get('groups', 1))

    @property
    def is_spatial(self) -> bool:
        h, w = self.kernel
        return self.kind is LayerKind.CONV2D and h * w > 1

    def with_attrs(self, **changes) -> 'LayerNode':
        return LayerNode(self.id, self.kind, {**self.attrs, **changes})


@dataclass(frozen=True, eq=False)
class ParamTensor:
    """
    Named parameter (or BatchNorm buffer) of a layer.

    The stored tensor is a read-only ``float32`` copy. Equality compares the
    raw bytes, so two tensors are equal exactly when they are bit-identical.
    """

    owner: str
    name: str
    tensor: np.ndarray
    fixed: bool = False
    spatial: bool = False
    buffer: bool = False

    def __post_init__(self):
        array = np.array(self.tensor, dtype=np.float32, copy=True, order='C')
        array.setflags(write=False)
        object.__setattr__(self, 'tensor', array)

    @property
    def key(self) -> Tuple[str, str]:
        return (self.owner, self.name)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.tensor.shape)

    @property
    def size(self) -> int:
        return int(self.tensor.size)

    def replace(self, **changes) -> 'ParamTensor':
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, ParamTensor):
            return NotImplemented
        return (
            self.key == other.key
            and (self.fixed, self.spatial, self.buffer)
            == (other.fixed, other.spatial, other.buffer)
            and self.shape == other.shape
            and self.tensor.tobytes() == other.tensor.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class NetworkGraph:
    nodes: Tuple[LayerNode, ...]
    edges: Tuple[Tuple[str, str], ...]
    inputs: Tuple[str, ...]
    outputs: Tuple[str, ...]
    params: Tuple[ParamTensor, ...]
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'nodes', tuple(self.nodes))
        object.__setattr__(self, 'edges', tuple((str(s), str(d)) for s, d in self.edges))
        object.__setattr__(self, 'inputs', tuple(self.inputs))
        object.__setattr__(self, 'outputs', tuple(self.outputs))
        object.__setattr__(self, 'params', tuple(self.params))
        object.__setattr__(self, 'meta', MappingProxyType(dict(self.meta)))

    def __eq__(self, other):
        if not isinstance(other, NetworkGraph):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and self.edges == other.edges
            and self.inputs == other.inputs
            and self.outputs == other.outputs
            and self.params == other.params
            and dict(self.meta) == dict(other.meta)
        )

    __hash__ = None  # type: ignore[assignment]

    @cached_property
    def _node_map(self) -> Dict[str, LayerNode]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def _param_map(self) -> Dict[Tuple[str, str], ParamTensor]:
        return {p.key: p for p in self.params}

    @cached_property
    def _adjacency(self) -> Tuple[Dict[str, List[str]], Dict[str, List[str]]]:
        preds: Dict[str, List[str]] = defaultdict(list)
        succs: Dict[str, List[str]] = defaultdict(list)
        for src, dst in self.edges:
            preds[dst].append(src)
            succs[src].append(dst)
        return preds, succs

    def node(self, node_id: str) -> LayerNode:
        try:
            return self._node_map[node_id]
        except KeyError:
            raise GraphError('unknown_node', f"No node with id '{node_id}'") from None

    def has_node(self, node_id: str) -> bool:
        return node_id in self._node_map

    def predecessors(self, node_id: str) -> List[str]:
        return list(self._adjacency[0].get(node_id, ()))

    def successors(self, node_id: str) -> List[str]:
        return list(self._adjacency[1].get(node_id, ()))

    def param(self, owner: str, name: str) -> ParamTensor:
        try:
            return self._param_map[(owner, name)]
        except KeyError:
            raise GraphError('param_shape', f"Node '{owner}' has no parameter '{name}'") from None

    def params_of(self, owner: str) -> Dict[str, ParamTensor]:
        return {p.name: p for p in self.params if p.owner == owner}

    def spatial_params(self) -> List[ParamTensor]:
        """Spatial kernels in node order."""
        return [p for p in self.params if p.spatial]

    @cached_property
    def topological_order(self) -> Tuple[str, ...]:
        """Node ids in dependency order; ties keep node order."""
        rank = {n.id: i for i, n in enumerate(self.nodes)}
        sorter = graphlib.TopologicalSorter({n.id: self.predecessors(n.id) for n in self.nodes})
        try:
            sorter.prepare()
        except graphlib.CycleError as e:
            raise GraphError('cycle', f"Graph contains a cycle through {e.args[1]}") from None
        order: List[str] = []
        while sorter.is_active():
            ready = sorted(sorter.get_ready(), key=lambda i: rank.get(i, len(rank)))
            order.extend(ready)
            sorter.done(*ready)
        return tuple(order)

    @cached_property
    def out_channels(self) -> Dict[str, int]:
        """Channel (or feature) count of every node's output."""
        channels: Dict[str, int] = {}
        for node_id in self.topological_order:
            node = self.node(node_id)
            preds = [channels[p] for p in self.predecessors(node_id) if p in channels]
            kind = node.kind
            if kind is LayerKind.INPUT:
                channels[node_id] = int(node.attrs['channels'])
            elif node.is_conv:
                channels[node_id] = int(node.attrs['out_channels'])
            elif kind is LayerKind.BATCH_NORM:
                channels[node_id] = int(node.attrs['channels'])
            elif kind is LayerKind.LINEAR:
                channels[node_id] = int(node.attrs['out_features'])
            elif kind is LayerKind.CONCAT:
                channels[node_id] = int(sum(preds))
            else:
                channels[node_id] = preds[0] if preds else 0
        return channels

    def num_parameters(self, spatial: Optional[bool] = None) -> int:
        """
        Count trainable-shaped parameters (BatchNorm buffers excluded).

        Parameters
        ----------
        spatial : bool, optional
            ``True`` counts only spatial kernels, ``False`` only the rest,
            ``None`` (default) everything.
        """
        return int(
            sum(
                p.size
                for p in self.params
                if not p.buffer and (spatial is None or p.spatial == spatial)
            )
        )

    def parameter_breakdown(self) -> Dict[str, Tuple[int, int]]:
        """``{block: (parameters, spatial parameters)}`` keyed by the node id prefix."""
        breakdown: Dict[str, List[int]] = {}
        for p in self.params:
            if p.buffer:
                continue
            block = p.owner.split('.')[0]
            entry = breakdown.setdefault(block, [0, 0])
            entry[0] += p.size
            if p.spatial:
                entry[1] += p.size
        return {k: (v[0], v[1]) for k, v in breakdown.items()}

    def replace(self, **changes) -> 'NetworkGraph':
        return dataclasses.replace(self, **changes)

    def with_params(self, updates: Iterable[ParamTensor]) -> 'NetworkGraph':
        """Copy of the graph with the given parameters swapped in by key."""
        updated = {p.key: p for p in updates}
        unknown = set(updated) - set(self._param_map)
        if unknown:
            raise GraphError('param_shape', f"Unknown parameters {sorted(unknown)}")
        return self.replace(params=tuple(updated.get(p.key, p) for p in self.params))

    def with_meta(self, **changes) -> 'NetworkGraph':
        return self.replace(meta={**self.meta, **changes})


def expected_params(node: LayerNode) -> Dict[str, Tuple[Tuple[int, ...], bool, bool]]:
    """``{name: (shape, spatial, buffer)}`` of the parameters a node must own."""
    attrs = node.attrs
    if node.is_conv:
        out_ch, in_ch, groups = attrs['out_channels'], attrs['in_channels'], node.groups
        h, w = node.kernel
        shapes = {'weight': ((out_ch, in_ch // max(groups, 1), h, w), node.is_spatial, False)}
        if attrs.get('bias', False):
            shapes['bias'] = ((out_ch,), False, False)
        return shapes
    if node.kind is LayerKind.BATCH_NORM:
        c = (attrs['channels'],)
        return {
            'weight': (c, False, False),
            'bias': (c, False, False),
            'running_mean': (c, False, True),
            'running_var': (c, False, True),
        }
    if node.kind is LayerKind.LINEAR:
        return {
            'weight': ((attrs['out_features'], attrs['in_features']), False, False),
            'bias': ((attrs['out_features'],), False, False),
        }
    if node.kind is LayerKind.SCALAR_FUSION:
        return {'weight': ((attrs.get('count', 2),), False, False)}
    return {}


def _expected_arity(node: LayerNode) -> Tuple[int, Optional[int]]:
    if node.kind is LayerKind.INPUT:
        return 0, 0
    if node.kind in UNARY_KINDS:
        return 1, 1
    if node.kind is LayerKind.SCALAR_FUSION:
        count = int(node.attrs.get('count', 2))
        return count, count
    return 2, None


def validate_graph(net: NetworkGraph) -> NetworkGraph:
    """
    Check structure, channel bookkeeping and parameter shapes.

    Parameters
    ----------
    net : NetworkGraph
        Graph to check.

    Returns
    -------
    net : NetworkGraph
        The same graph, for chaining.

    Raises
    ------
    GraphError
        With ``code`` one of ``unknown_node``, ``cycle``, ``dangling``,
        ``arity``, ``groups``, ``channel_mismatch`` or ``param_shape``.
    """
    ids = [n.id for n in net.nodes]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise GraphError('unknown_node', f"Duplicate node ids {dupes}")
    known = set(ids)
    for src, dst in net.edges:
        for end in (src, dst):
            if end not in known:
                raise GraphError(
                    'unknown_node', f"Edge {src}->{dst} references unknown node '{end}'"
                )
    for node_id in net.inputs + net.outputs:
        if node_id not in known:
            raise GraphError('unknown_node', f"Graph input/output '{node_id}' is not a node")
    for p in net.params:
        if p.owner not in known:
            raise GraphError('unknown_node', f"Parameter {p.owner}.{p.name} has no owning node")

    order = net.topological_order

    for node in net.nodes:
        if node.kind is LayerKind.INPUT and node.id not in net.inputs:
            raise GraphError('dangling', f"Input node '{node.id}' is not listed as graph input")
    for node_id in net.inputs:
        if net.node(node_id).kind is not LayerKind.INPUT:
            raise GraphError('arity', f"Graph input '{node_id}' is not an input node")
    reached = set(net.inputs)
    queue = deque(net.inputs)
    while queue:
        for nxt in net.successors(queue.popleft()):
            if nxt not in reached:
                reached.add(nxt)
                queue.append(nxt)
    unreachable = [i for i in ids if i not in reached]
    if unreachable:
        raise GraphError('dangling', f"Nodes not reachable from an input: {unreachable}")
    sinks = [i for i in ids if not net.successors(i) and i not in net.outputs]
    if sinks:
        raise GraphError('dangling', f"Nodes whose output is never used: {sinks}")

    channels = net.out_channels
    for node_id in order:
        node = net.node(node_id)
        preds = net.predecessors(node_id)
        low, high = _expected_arity(node)
        if len(preds) < low or (high is not None and len(preds) > high):
            raise GraphError(
                'arity', f"Node '{node_id}' ({node.kind.value}) has {len(preds)} inputs"
            )
        incoming = [channels[p] for p in preds]
        if node.kind is LayerKind.ACTIVATION and node.attrs.get('fn') not in ACTIVATIONS:
            raise GraphError('unknown_kind', f"Node '{node_id}' has unknown activation")
        if node.is_conv:
            groups = node.groups
            in_ch, out_ch = node.attrs['in_channels'], node.attrs['out_channels']
            if groups < 1 or in_ch % groups or out_ch % groups:
                raise GraphError(
                    'groups', f"Node '{node_id}': {in_ch}->{out_ch} channels with {groups} groups"
                )
            expected_in = in_ch
        elif node.kind is LayerKind.BATCH_NORM:
            expected_in = node.attrs['channels']
        elif node.kind is LayerKind.LINEAR:
            expected_in = node.attrs['in_features']
        elif node.kind in (LayerKind.ADD, LayerKind.SCALAR_FUSION):
            expected_in = incoming[0]
        else:
            expected_in = None
        if expected_in is not None and any(c != expected_in for c in incoming):
            raise GraphError(
                'channel_mismatch',
                f"Node '{node_id}' expects {expected_in} channels, receives {incoming}",
            )

        owned = net.params_of(node_id)
        expected = expected_params(node)
        if set(owned) != set(expected):
            raise GraphError(
                'param_shape',
                f"Node '{node_id}' owns {sorted(owned)}, expected {sorted(expected)}",
            )
        for name, (shape, spatial, buffer) in expected.items():
            p = owned[name]
            if p.shape != tuple(shape) or p.spatial != spatial or p.buffer != buffer:
                raise GraphError(
                    'param_shape',
                    f"Parameter {node_id}.{name} has shape {p.shape} (spatial={p.spatial}, "
                    f"buffer={p.buffer}), expected {tuple(shape)} (spatial={spatial}, "
                    f"buffer={buffer})",
                )
    return net


def spatial_layers(net: NetworkGraph) -> List[LayerNode]:
    """Spatial convolutions in node order."""
    return [n for n in net.nodes if n.is_spatial]


def initializer_specs(
    net: NetworkGraph,
    method: Union[str, InitMethod],
    seed: int = 0,
    guide: Optional[NetworkGraph] = None,
    distribution: str = 'kde',
    centered: bool = False,
) -> Dict[str, FilterSpec]:
    """
    One :class:`FilterSpec` per spatial layer of ``net``.

    Parameters
    ----------
    net : NetworkGraph
        Network to initialize.
    method : str or InitMethod
        Initialization method applied to all spatial layers.
    seed : int, optional
        Master seed, by default 0.
    guide : NetworkGraph, optional
        Network whose spatial kernels guide ``unchanged-guide`` and
        ``guided-steer``; it must have the same spatial layer ids.
    distribution, centered
        Passed to GuidedSteer.

    Returns
    -------
    specs : dict
        ``{layer id: FilterSpec}``.
    """
    method = InitMethod(method)
    if method.requires_guide and guide is None:
        raise ConfigError(f"Method '{method.value}' needs a guide network")
    specs = {}
    for node in spatial_layers(net):
        weight = net.param(node.id, 'weight')
        out_ch, ipg, h, w = weight.shape
        guide_kernels = None
        if method.requires_guide:
            if not guide.has_node(node.id):
                raise DimensionError(f"Guide network has no layer '{node.id}'")
            g = guide.param(node.id, 'weight').tensor
            if g.shape[-2:] != (h, w):
                raise DimensionError(
                    f"Guide layer '{node.id}' has {g.shape[-2:]} kernels, expected {(h, w)}"
                )
            guide_kernels = g.reshape(-1, h, w)
        specs[node.id] = FilterSpec(
            method=method,
            kernel_shape=(h, w),
            count=out_ch * ipg,
            seed=seed,
            guide=guide_kernels,
            fan_in=ipg * h * w,
            distribution=distribution,
            centered=centered,
        )
    return specs


def apply_initializer(net: NetworkGraph, specs: Mapping[str, FilterSpec]) -> NetworkGraph:
    """
    Overwrite every spatial kernel with generated filters and mark it fixed.

    Layer ``i`` (in node order) draws from ``RngStream(spec.seed).derive(i)``.
    GuidedSteer layers sharing a kernel size are generated together so they
    share one guide basis.

    Parameters
    ----------
    net : NetworkGraph
        Network to initialize.
    specs : mapping
        ``{layer id: FilterSpec}`` covering every spatial layer.

    Returns
    -------
    net : NetworkGraph
        New graph; non-spatial parameters are untouched.
    """
    layers = spatial_layers(net)
    missing = [n.id for n in layers if n.id not in specs]
    if missing:
        raise ConfigError(f"No filter spec for spatial layers {missing}")

    generated: Dict[str, np.ndarray] = {}
    guided: Dict[Tuple[int, int], List[Tuple[int, LayerNode]]] = defaultdict(list)
    for index, node in enumerate(layers):
        spec = specs[node.id]
        weight = net.param(node.id, 'weight')
        if spec.kernel_shape != tuple(weight.shape[-2:]):
            raise DimensionError(
                f"Layer '{node.id}' has {weight.shape[-2:]} kernels, spec asks for "
                f"{spec.kernel_shape}"
            )
        if spec.method is InitMethod.GUIDED_STEER:
            guided[spec.kernel_shape].append((index, node))
            continue
        kernels = generate_filters(spec, RngStream(spec.seed).derive(index))
        if kernels.size != weight.size:
            raise DimensionError(
                f"Layer '{node.id}' needs {weight.size} values, generator returned {kernels.size}"
            )
        generated[node.id] = kernels.reshape(weight.shape)

    for (h, w), group in guided.items():
        first = specs[group[0][1].id]
        rng = RngStream(first.seed).derive(h, w)
        kernels = guided_steer_filters(
            [specs[node.id].count for _, node in group],
            [np.asarray(specs[node.id].guide).reshape(-1, h * w) for _, node in group],
            rng,
            distribution=first.distribution,
            centered=first.centered,
        )
        for (_, node), bank in zip(group, kernels):
            generated[node.id] = bank.reshape(net.param(node.id, 'weight').shape)

    for node in layers:
        logger.debug(f"{node.id}: {specs[node.id].method.value} {generated[node.id].shape}")
    return net.with_params(
        net.param(node_id, 'weight').replace(tensor=kernels, fixed=True)
        for node_id, kernels in generated.items()
    )


def fixed_snapshot(net: NetworkGraph) -> Dict[Tuple[str, str], bytes]:
    return {p.key: p.tensor.tobytes() for p in net.params if p.fixed}


def iter_kernels(net: NetworkGraph) -> Sequence[Tuple[int, str, int, int]]:
    """Structural index ``(layer index, layer id, out, in)`` of every spatial kernel."""
    index = []
    for li, node in enumerate(spatial_layers(net)):
        out_ch, ipg = net.param(node.id, 'weight').shape[:2]
        index.extend((li, node.id, o, i) for o in range(out_ch) for i in range(ipg))
    return index
