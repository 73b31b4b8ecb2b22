"""
Reference architectures built as :class:`~steerfix.netgraph.NetworkGraph`.

Node ids are ``<block>.<layer>`` so parameter counts can be broken down per
block.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .netgraph import (
    LayerKind,
    LayerNode,
    NetworkGraph,
    ParamTensor,
    expected_params,
    validate_graph,
)
from .numerics import RngStream, kaiming_uniform

logger = logging.getLogger(__name__)

UNETD_REFERENCE_PARAMS = 116695

DEFAULT_UNETD_CONFIG = {
    "widths": (3, 8, 16, 32, 64),
    "expansion": 6,
    "in_channels": 1,
    "out_channels": 1,
}

UNETD_NOTES = (
    "CELU precedes BatchNorm inside every bottleneck",
    "the projecting pointwise convolution has no activation",
    "decoder fuses the upsampled features with the skip connection by two learned scalars",
)


class GraphBuilder:
    """
    Incrementally assemble a network graph with freshly initialized parameters.

    Convolution and linear weights are Kaiming uniform, biases zero, BatchNorm
    scale one and shift zero with fresh running statistics, fusion scalars one.

    Parameters
    ----------
    seed : int, optional
        Seed of the weight initialization, by default 0.
    """

    def __init__(self, seed: int = 0):
        self.rng = RngStream(seed)
        self.nodes: List[LayerNode] = []
        self.edges: List[Tuple[str, str]] = []
        self.params: List[ParamTensor] = []
        self.channels: Dict[str, int] = {}
        self.inputs: List[str] = []

    def _add(self, node_id: str, kind: LayerKind, sources: Sequence[str], width: int, **attrs):
        if node_id in self.channels:
            raise ConfigError(f"Duplicate node id '{node_id}'")
        node = LayerNode(node_id, kind, attrs)
        stream = self.rng.derive(len(self.nodes))
        self.nodes.append(node)
        self.edges.extend((src, node_id) for src in sources)
        self.channels[node_id] = width
        for name, (shape, spatial, buffer) in expected_params(node).items():
            self.params.append(
                ParamTensor(
                    node_id, name, self._init(node, name, shape, stream), False, spatial, buffer
                )
            )
        return node_id

    @staticmethod
    def _init(node: LayerNode, name: str, shape: Tuple[int, ...], rng: RngStream) -> np.ndarray:
        if name == 'weight' and (node.is_conv or node.kind is LayerKind.LINEAR):
            fan_in = int(np.prod(shape[1:]))
            return kaiming_uniform(fan_in, shape, rng)
        if name in ('weight', 'running_var'):
            return np.ones(shape)
        return np.zeros(shape)

    def input(self, channels: int, node_id: str = 'input') -> str:
        self.inputs.append(node_id)
        return self._add(node_id, LayerKind.INPUT, (), channels, channels=channels)

    def conv2d(
        self,
        src: str,
        node_id: str,
        out_channels: int,
        kernel: int = 3,
        stride: int = 1,
        groups: int = 1,
        bias: bool = False,
    ) -> str:
        return self._add(
            node_id,
            LayerKind.CONV2D,
            (src,),
            out_channels,
            in_channels=self.channels[src],
            out_channels=out_channels,
            kernel=(kernel, kernel),
            stride=stride,
            padding=(kernel // 2, kernel // 2),
            groups=groups,
            bias=bias,
        )

    def pointwise(self, src: str, node_id: str, out_channels: int, bias: bool = False) -> str:
        return self._add(
            node_id,
            LayerKind.POINTWISE_CONV,
            (src,),
            out_channels,
            in_channels=self.channels[src],
            out_channels=out_channels,
            stride=1,
            bias=bias,
        )

    def batch_norm(self, src: str, node_id: str) -> str:
        c = self.channels[src]
        return self._add(node_id, LayerKind.BATCH_NORM, (src,), c, channels=c)

    def activation(self, src: str, node_id: str, fn: str) -> str:
        return self._add(node_id, LayerKind.ACTIVATION, (src,), self.channels[src], fn=fn)

    def add(self, sources: Sequence[str], node_id: str) -> str:
        return self._add(node_id, LayerKind.ADD, sources, self.channels[sources[0]])

    def concat(self, sources: Sequence[str], node_id: str) -> str:
        total = sum(self.channels[s] for s in sources)
        return self._add(node_id, LayerKind.CONCAT, sources, total)

    def upsample(self, src: str, node_id: str, scale: int = 2) -> str:
        c = self.channels[src]
        return self._add(node_id, LayerKind.BILINEAR_UPSAMPLE, (src,), c, scale=scale)

    def global_avg_pool(self, src: str, node_id: str) -> str:
        return self._add(node_id, LayerKind.GLOBAL_AVG_POOL, (src,), self.channels[src])

    def linear(self, src: str, node_id: str, out_features: int) -> str:
        return self._add(
            node_id,
            LayerKind.LINEAR,
            (src,),
            out_features,
            in_features=self.channels[src],
            out_features=out_features,
        )

    def scalar_fusion(self, sources: Sequence[str], node_id: str) -> str:
        c = self.channels[sources[0]]
        return self._add(node_id, LayerKind.SCALAR_FUSION, sources, c, count=len(sources))

    def build(self, outputs: Sequence[str], **meta) -> NetworkGraph:
        net = NetworkGraph(
            nodes=self.nodes,
            edges=self.edges,
            inputs=self.inputs,
            outputs=tuple(outputs),
            params=self.params,
            meta=meta,
        )
        return validate_graph(net)


def separable_bottleneck(
    builder: GraphBuilder, src: str, block: str, out_channels: int, stride: int, expansion: int
) -> str:
    """
    Depthwise-separable bottleneck
    (1x1 expand -> CELU -> BN -> 3x3 depthwise -> CELU -> BN -> 1x1 project)
    """
    hidden = builder.channels[src] * expansion
    x = builder.pointwise(src, f'{block}.expand', hidden)
    x = builder.activation(x, f'{block}.celu1', 'celu')
    x = builder.batch_norm(x, f'{block}.bn1')
    x = builder.conv2d(x, f'{block}.spatial', hidden, kernel=3, stride=stride, groups=hidden)
    x = builder.activation(x, f'{block}.celu2', 'celu')
    x = builder.batch_norm(x, f'{block}.bn2')
    return builder.pointwise(x, f'{block}.project', out_channels)


def build_unetd(
    widths: Sequence[int] = DEFAULT_UNETD_CONFIG["widths"],
    expansion: int = DEFAULT_UNETD_CONFIG["expansion"],
    in_channels: int = DEFAULT_UNETD_CONFIG["in_channels"],
    out_channels: int = DEFAULT_UNETD_CONFIG["out_channels"],
    seed: int = 0,
) -> NetworkGraph:
    """
    Depthwise-separable U-Net for binary segmentation.

    The encoder applies one bottleneck per level (stride 1 at the first level,
    stride 2 below). Each decoder level maps the coarser features to the
    level's width with a bottleneck, upsamples them bilinearly by two and
    fuses them with the encoder features through two learned scalars. A 3x3
    convolution produces the logits. Input height and width must be
    divisible by ``2 ** (len(widths) - 1)``.

    Parameters
    ----------
    widths : sequence of int, optional
        Channel width per level, by default ``(3, 8, 16, 32, 64)``.
    expansion : int, optional
        Channel expansion of the bottlenecks, by default 6.
    in_channels : int, optional
        Image channels, by default 1.
    out_channels : int, optional
        Logit channels, by default 1.
    seed : int, optional
        Weight initialization seed, by default 0.

    Returns
    -------
    net : NetworkGraph
        Validated graph.
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or min(widths) < 1 or expansion < 1:
        raise ConfigError(f"Invalid U-NetD configuration widths={widths}, expansion={expansion}")

    b = GraphBuilder(seed)
    x = b.input(in_channels)
    skips = []
    for level, width in enumerate(widths):
        stride = 1 if level == 0 else 2
        x = separable_bottleneck(b, x, f'enc{level}', width, stride, expansion)
        skips.append(x)

    for level in reversed(range(len(widths) - 1)):
        x = separable_bottleneck(b, x, f'dec{level}', widths[level], 1, expansion)
        x = b.upsample(x, f'dec{level}.up')
        x = b.scalar_fusion([skips[level], x], f'dec{level}.fuse')

    logits = b.conv2d(x, 'head.conv', out_channels, kernel=3)
    return b.build(
        [logits],
        architecture='unetd',
        task='segmentation',
        widths=list(widths),
        expansion=expansion,
        notes=list(UNETD_NOTES),
    )


def build_tiny_resnet(
    stages: int = 2, width: int = 8, in_channels: int = 1, num_classes: int = 5, seed: int = 0
) -> NetworkGraph:
    """
    Small residual classifier with 1x1 -> 3x3 -> 1x1 bottlenecks and add skips.
    """
    if stages < 1 or width < 2:
        raise ConfigError(f"TinyResNet needs stages >= 1 and width >= 2, got {stages}, {width}")
    b = GraphBuilder(seed)
    x = b.input(in_channels)
    x = b.conv2d(x, 'stem.conv', width)
    x = b.batch_norm(x, 'stem.bn')
    x = b.activation(x, 'stem.relu', 'relu')
    inner = width // 2
    for s in range(stages):
        block = f'stage{s}'
        skip = x
        y = b.pointwise(x, f'{block}.reduce', inner)
        y = b.batch_norm(y, f'{block}.bn1')
        y = b.activation(y, f'{block}.relu1', 'relu')
        y = b.conv2d(y, f'{block}.spatial', inner)
        y = b.batch_norm(y, f'{block}.bn2')
        y = b.activation(y, f'{block}.relu2', 'relu')
        y = b.pointwise(y, f'{block}.expand', width)
        y = b.batch_norm(y, f'{block}.bn3')
        x = b.add([skip, y], f'{block}.add')
        x = b.activation(x, f'{block}.relu3', 'relu')
    x = b.global_avg_pool(x, 'head.pool')
    logits = b.linear(x, 'head.fc', num_classes)
    return b.build(
        [logits], architecture='tiny-resnet', task='multilabel', stages=stages, width=width
    )


def build_tiny_densenet(
    blocks: int = 2, growth: int = 4, in_channels: int = 1, num_classes: int = 5, seed: int = 0
) -> NetworkGraph:
    """
    Small densely connected classifier.

    Every dense layer is BN -> ReLU -> 1x1 -> BN -> ReLU -> 3x3 producing
    ``growth`` channels that are concatenated to its input, so the concat of
    layer ``k`` (1-based) carries ``2 * growth + k * growth`` channels.
    """
    if blocks < 1 or growth < 1:
        raise ConfigError(
            f"TinyDenseNet needs blocks >= 1 and growth >= 1, got {blocks}, {growth}"
        )
    b = GraphBuilder(seed)
    x = b.input(in_channels)
    x = b.conv2d(x, 'stem.conv', 2 * growth)
    x = b.batch_norm(x, 'stem.bn')
    x = b.activation(x, 'stem.relu', 'relu')
    for k in range(blocks):
        block = f'dense{k}'
        y = b.batch_norm(x, f'{block}.bn1')
        y = b.activation(y, f'{block}.relu1', 'relu')
        y = b.pointwise(y, f'{block}.bottleneck', 2 * growth)
        y = b.batch_norm(y, f'{block}.bn2')
        y = b.activation(y, f'{block}.relu2', 'relu')
        y = b.conv2d(y, f'{block}.spatial', growth)
        x = b.concat([x, y], f'{block}.concat')
    x = b.batch_norm(x, 'head.bn')
    x = b.activation(x, 'head.relu', 'relu')
    x = b.global_avg_pool(x, 'head.pool')
    logits = b.linear(x, 'head.fc', num_classes)
    return b.build(
        [logits], architecture='tiny-densenet', task='multilabel', blocks=blocks, growth=growth
    )


ARCHITECTURES = {
    'unetd': build_unetd,
    'tiny-resnet': build_tiny_resnet,
    'tiny-densenet': build_tiny_densenet,
}


def build_network(architecture: str, seed: int = 0, **kwargs) -> NetworkGraph:
    try:
        builder = ARCHITECTURES[architecture]
    except KeyError:
        raise ConfigError(
            f"Unknown architecture '{architecture}', choose from {sorted(ARCHITECTURES)}"
        ) from None
    return builder(seed=seed, **kwargs)


def unetd_reference_report(net: NetworkGraph, reference: Optional[int] = None) -> Dict[str, int]:
    """
    Log the parameter count of a U-NetD against the published total.

    Parameters
    ----------
    net : NetworkGraph
        U-NetD graph.
    reference : int, optional
        Reference total, by default 116 695.

    Returns
    -------
    summary : dict
        ``total``, ``spatial``, ``reference`` and ``difference``.
    """
    reference = UNETD_REFERENCE_PARAMS if reference is None else reference
    total = net.num_parameters()
    spatial = net.num_parameters(spatial=True)
    logger.info(f"U-NetD parameters: {total} ({spatial} spatial, {100.0 * spatial / total:.2f}%)")
    if total != reference:
        logger.warning(f"Parameter count {total} differs from reference {reference}")
        for block, (count, block_spatial) in net.parameter_breakdown().items():
            logger.warning(f"  {block:<6} {count:>7} params, {block_spatial:>5} spatial")
    return {
        'total': total,
        'spatial': spatial,
        'reference': reference,
        'difference': total - reference,
    }
