"""
Differentiable execution of :class:`~steerfix.netgraph.NetworkGraph` with torch.

The graph is compiled into torch leaf tensors by :class:`Executor`; forward
passes use ``torch.nn.functional`` ops, gradients come from autograd and
training uses ``torch.optim.Adam`` over the learned parameters only.
"""

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Protocol, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    DomainError,
    EngineError,
    FixedParameterError,
)
from .netgraph import LayerKind, LayerNode, NetworkGraph, fixed_snapshot
from .numerics import RngStream
from .utils import PathLike

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
PROB_SCALE = 0.99999
PROB_OFFSET = 0.000005
DEFAULT_BATCH_SIZE = 8


@dataclass
class Batch:
    """
    One minibatch.

    Parameters
    ----------
    inputs : np.ndarray
        ``(N, C, H, W)`` images.
    targets : np.ndarray, optional
        Labels in ``[0, 1]``: ``(N, 1, H, W)`` masks or ``(N, T)`` task labels.
    mask : np.ndarray, optional
        ``{0, 1}`` array shaped like ``targets``; zeros mark ignored labels.
    """

    inputs: np.ndarray
    targets: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        if self.inputs.ndim != 4 or self.inputs.shape[0] < 1:
            raise DimensionError(f"Batch inputs must be (N>=1, C, H, W), got {self.inputs.shape}")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float32)
            if self.targets.shape[0] != self.inputs.shape[0]:
                raise DimensionError("Targets and inputs have different batch sizes")
            if np.any(self.targets < 0) or np.any(self.targets > 1):
                raise DomainError("Targets must lie in [0, 1]")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float32)
            if self.targets is None or self.mask.shape != self.targets.shape:
                raise DimensionError("Label mask must have the shape of the targets")

    @property
    def labeled(self) -> bool:
        return self.targets is not None

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


class BatchSource(Protocol):
    """Anything that yields labeled batches (see :mod:`steerfix.datasets`)."""

    task: str

    def __len__(self) -> int: ...

    def batches(self, batch_size: int, rng: Optional[RngStream] = None) -> Iterator[Batch]: ...

    def class_counts(self) -> Optional[np.ndarray]: ...


@dataclass
class GradientTape:
    """Gradients keyed by ``(owner, name)`` of the parameter they belong to."""

    grads: Dict[Tuple[str, str], np.ndarray]

    def __getitem__(self, key: Tuple[str, str]) -> np.ndarray:
        return self.grads[key]

    def __contains__(self, key) -> bool:
        return key in self.grads

    def keys(self):
        return self.grads.keys()


class Executor:
    """
    A network graph compiled into torch tensors.

    Parameters
    ----------
    net : NetworkGraph
        Graph to execute; it is not modified.
    dtype : torch.dtype, optional
        Compute precision, by default ``torch.float32``.
    training : bool, optional
        BatchNorm uses batch statistics and updates running averages when
        True, by default False.
    track_fixed : bool, optional
        Whether fixed parameters require gradients, by default True. Training
        turns this off so no gradient work is spent on fixed kernels.
    """

    def __init__(
        self,
        net: NetworkGraph,
        dtype: torch.dtype = torch.float32,
        training: bool = False,
        track_fixed: bool = True,
    ):
        if len(net.inputs) != 1:
            raise EngineError(f"Expected a single graph input, got {list(net.inputs)}")
        self.net = net
        self.dtype = dtype
        self.training = training
        self.order = net.topological_order
        self.tensors: Dict[Tuple[str, str], torch.Tensor] = {}
        for p in net.params:
            t = torch.tensor(p.tensor, dtype=dtype)
            t.requires_grad_(not p.buffer and (track_fixed or not p.fixed))
            self.tensors[p.key] = t
        self._activations: Optional[Dict[str, torch.Tensor]] = None

    def parameters(self, learned_only: bool = True) -> List[torch.Tensor]:
        return [
            self.tensors[p.key]
            for p in self.net.params
            if not p.buffer and not (learned_only and p.fixed)
        ]

    def _apply(self, node: LayerNode, operands: List[torch.Tensor]) -> torch.Tensor:
        kind, attrs = node.kind, node.attrs
        t = self.tensors
        if node.is_conv:
            return F.conv2d(
                operands[0],
                t[(node.id, 'weight')],
                t.get((node.id, 'bias')),
                stride=attrs.get('stride', 1),
                padding=tuple(attrs.get('padding', (0, 0))),
                groups=node.groups,
            )
        if kind is LayerKind.BATCH_NORM:
            return F.batch_norm(
                operands[0],
                t[(node.id, 'running_mean')],
                t[(node.id, 'running_var')],
                t[(node.id, 'weight')],
                t[(node.id, 'bias')],
                training=self.training,
                momentum=BN_MOMENTUM,
                eps=BN_EPS,
            )
        if kind is LayerKind.LINEAR:
            return F.linear(operands[0], t[(node.id, 'weight')], t[(node.id, 'bias')])
        if kind is LayerKind.ACTIVATION:
            fn = attrs['fn']
            if fn == 'celu':
                return F.celu(operands[0])
            if fn == 'relu':
                return F.relu(operands[0])
            return torch.sigmoid(operands[0])
        if kind is LayerKind.ADD:
            return torch.stack(operands).sum(dim=0)
        if kind is LayerKind.CONCAT:
            return torch.cat(operands, dim=1)
        if kind is LayerKind.BILINEAR_UPSAMPLE:
            return F.interpolate(
                operands[0],
                scale_factor=attrs.get('scale', 2),
                mode='bilinear',
                align_corners=False,
            )
        if kind is LayerKind.GLOBAL_AVG_POOL:
            return operands[0].mean(dim=(2, 3))
        if kind is LayerKind.SCALAR_FUSION:
            weight = t[(node.id, 'weight')]
            return sum(weight[i] * x for i, x in enumerate(operands))
        raise EngineError(f"Cannot execute node '{node.id}' of kind {kind.value}")

    def forward(self, inputs: Union[np.ndarray, torch.Tensor]) -> Dict[str, torch.Tensor]:
        """
        Run the graph on ``inputs`` and return every node's activation.

        Convolutions are cross-correlations (no kernel flip).
        """
        x = torch.as_tensor(np.asarray(inputs) if isinstance(inputs, np.ndarray) else inputs)
        x = x.to(self.dtype)
        source = self.net.inputs[0]
        channels = self.net.node(source).attrs['channels']
        if x.ndim != 4 or x.shape[1] != channels:
            raise EngineError(
                f"Expected input of shape (N, {channels}, H, W), got {tuple(x.shape)}"
            )
        acts: Dict[str, torch.Tensor] = {}
        for node_id in self.order:
            node = self.net.node(node_id)
            if node.kind is LayerKind.INPUT:
                acts[node_id] = x
                continue
            operands = [acts[p] for p in self.net.predecessors(node_id)]
            try:
                acts[node_id] = self._apply(node, operands)
            except RuntimeError as e:
                raise EngineError(f"Node '{node_id}' failed: {e}") from e
        self._activations = acts
        return acts

    def output(self, acts: Optional[Dict[str, torch.Tensor]] = None) -> torch.Tensor:
        acts = acts if acts is not None else self._activations
        if acts is None:
            raise EngineError("No forward pass has been run")
        return acts[self.net.outputs[0]]

    def __call__(self, inputs) -> torch.Tensor:
        return self.output(self.forward(inputs))

    def reset(self) -> None:
        """Drop the activations of the last forward pass."""
        self._activations = None

    def backward(self, loss: torch.Tensor) -> GradientTape:
        """
        Gradients of ``loss`` for every tensor that requires them.

        Tensors the loss does not depend on get zero gradients.
        """
        if self._activations is None:
            raise EngineError("backward called before forward")
        keys = [k for k, t in self.tensors.items() if t.requires_grad]
        grads = torch.autograd.grad(loss, [self.tensors[k] for k in keys], allow_unused=True)
        self._activations = None
        tape = {}
        for key, grad in zip(keys, grads):
            value = torch.zeros_like(self.tensors[key]) if grad is None else grad
            tape[key] = value.detach().cpu().numpy()
        return GradientTape(tape)

    def export(self) -> NetworkGraph:
        """Graph with the current tensor values; fixed parameters are passed through."""
        updated = [
            p.replace(tensor=self.tensors[p.key].detach().cpu().numpy())
            for p in self.net.params
            if not p.fixed
        ]
        return self.net.with_params(updated)


def forward(net: NetworkGraph, inputs: np.ndarray, training: bool = False) -> Dict[str, np.ndarray]:
    """Activations of every node as float32 arrays."""
    executor = Executor(net, training=training, track_fixed=False)
    with torch.no_grad():
        acts = executor.forward(inputs)
    return {k: v.cpu().numpy() for k, v in acts.items()}


def backward(executor: Executor, loss: torch.Tensor) -> GradientTape:
    return executor.backward(loss)


def predict(net: NetworkGraph, inputs: np.ndarray) -> np.ndarray:
    return forward(net, inputs)[net.outputs[0]]


def class_balance_weights(class_counts: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Intra- and inter-class balancing weights of the multi-label loss.

    Parameters
    ----------
    class_counts : np.ndarray
        ``(2, T)`` counts of positive (row 0) and negative (row 1) labels per
        task over the training set.

    Returns
    -------
    a_pos, a_neg, w_task : np.ndarray
        Length-``T`` weights with ``a_pos = 1 / (1 + c_pos / c_neg)``,
        ``a_neg = 1 / (1 + c_neg / c_pos)`` and
        ``w_task = 1 / (1 + c_t * sum_{i != t} 1 / c_i)``.
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[0] != 2:
        raise DimensionError(f"class_counts must be (2, T), got {counts.shape}")
    if np.any(counts <= 0):
        raise DomainError("class_counts must be positive for every task")
    c_pos, c_neg = counts
    a_pos = 1.0 / (1.0 + c_pos / c_neg)
    a_neg = 1.0 / (1.0 + c_neg / c_pos)
    totals = c_pos + c_neg
    others = np.sum(1.0 / totals) - 1.0 / totals
    w_task = 1.0 / (1.0 + totals * others)
    return a_pos, a_neg, w_task


def rescaled_sigmoid(logits: torch.Tensor) -> torch.Tensor:
    return PROB_SCALE * torch.sigmoid(logits) + PROB_OFFSET


def focal_multilabel_bce(
    logits: torch.Tensor,
    targets: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    class_counts: Optional[np.ndarray] = None,
    gamma: float = 1.0,
    balance: bool = True,
) -> torch.Tensor:
    """
    Multi-label focal binary cross entropy with class balancing.

    ``L = -m * w_task * (a_pos (1-p)^g y log p + a_neg p^g (1-y) log(1-p))``
    with ``p = 0.99999 sigmoid(logits) + 0.000005``, summed over tasks and
    averaged over samples.

    Parameters
    ----------
    logits : torch.Tensor
        ``(N, T)`` raw outputs.
    targets : torch.Tensor
        ``(N, T)`` labels in ``[0, 1]``.
    mask : torch.Tensor, optional
        ``(N, T)`` bitmask of labels to keep, by default all ones.
    class_counts : np.ndarray, optional
        ``(2, T)`` positive/negative counts; ``None`` means unit weights.
    gamma : float, optional
        Focal exponent, by default 1.
    balance : bool, optional
        Set to False to force all balancing weights to one.

    Returns
    -------
    loss : torch.Tensor
        Scalar.
    """
    probs = rescaled_sigmoid(logits)
    targets = targets.to(probs.dtype)
    ones = torch.ones(probs.shape[-1], dtype=probs.dtype)
    a_pos, a_neg, w_task = ones, ones, ones
    if balance and class_counts is not None:
        a_pos, a_neg, w_task = (
            torch.as_tensor(v, dtype=probs.dtype) for v in class_balance_weights(class_counts)
        )
    w_pos = a_pos * (1 - probs) ** gamma
    w_neg = a_neg * probs ** gamma
    positive = w_pos * targets * torch.log(probs)
    negative = w_neg * (1 - targets) * torch.log(1 - probs)
    loss = -w_task * (positive + negative)
    if mask is not None:
        loss = loss * mask.to(probs.dtype)
    return loss.sum(dim=1).mean()


def pixelwise_bce(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy over all pixels, without class balancing."""
    return F.binary_cross_entropy(probs, targets.to(probs.dtype))


def dice_score(probs: np.ndarray, targets: np.ndarray, threshold: float = 0.5) -> float:
    """Dice coefficient of thresholded predictions; 1.0 when both are empty."""
    pred = np.asarray(probs) > threshold
    truth = np.asarray(targets) > 0.5
    denominator = pred.sum() + truth.sum()
    if denominator == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, truth).sum() / denominator)


def task_loss(
    task: str,
    logits: torch.Tensor,
    batch: Batch,
    class_counts: Optional[np.ndarray] = None,
) -> torch.Tensor:
    if not batch.labeled:
        raise DomainError("Cannot compute a loss on an unlabeled batch")
    targets = torch.as_tensor(batch.targets, dtype=logits.dtype)
    if task == 'segmentation':
        return pixelwise_bce(torch.sigmoid(logits), targets)
    if task == 'multilabel':
        mask = None if batch.mask is None else torch.as_tensor(batch.mask)
        return focal_multilabel_bce(logits, targets, mask, class_counts)
    raise ConfigError(f"Unknown task '{task}'")


@dataclass
class EvalResult:
    metric: float
    loss: float


class _MetricAccumulator:
    def __init__(self, task: str):
        self.task = task
        self.hits = 0.0
        self.total = 0.0

    def update(self, logits: np.ndarray, batch: Batch) -> None:
        probs = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
        if self.task == 'segmentation':
            pred = probs > 0.5
            truth = batch.targets > 0.5
            self.hits += 2.0 * np.logical_and(pred, truth).sum()
            self.total += pred.sum() + truth.sum()
        else:
            mask = np.ones_like(batch.targets) if batch.mask is None else batch.mask
            self.hits += float(np.sum(mask * ((probs > 0.5) == (batch.targets > 0.5))))
            self.total += float(mask.sum())

    def value(self) -> float:
        if self.total == 0:
            return 1.0
        return float(self.hits / self.total)


def _evaluate_executor(
    executor: Executor, source: BatchSource, batch_size: int
) -> EvalResult:
    training = executor.training
    executor.training = False
    counts = source.class_counts()
    metric = _MetricAccumulator(source.task)
    losses, sizes = [], []
    with torch.no_grad():
        for batch in source.batches(batch_size):
            logits = executor(batch.inputs)
            losses.append(float(task_loss(source.task, logits, batch, counts)))
            sizes.append(len(batch))
            metric.update(logits.cpu().numpy(), batch)
    executor.reset()
    executor.training = training
    loss = float(np.average(losses, weights=sizes)) if losses else float('nan')
    return EvalResult(metric.value(), loss)


def evaluate(
    net: NetworkGraph, source: BatchSource, batch_size: int = DEFAULT_BATCH_SIZE
) -> EvalResult:
    """
    Metric and mean loss of ``net`` on ``source`` in eval mode.

    The metric is the Dice coefficient over all pixels for segmentation and
    the masked label accuracy for multi-label classification.
    """
    return _evaluate_executor(Executor(net, track_fixed=False), source, batch_size)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    metric: float
    seconds: float


@dataclass
class TrainMetrics:
    epochs: List[EpochRecord] = field(default_factory=list)

    @property
    def seconds_per_epoch(self) -> float:
        return float(np.mean([e.seconds for e in self.epochs])) if self.epochs else 0.0

    @property
    def final_metric(self) -> float:
        return self.epochs[-1].metric if self.epochs else float('nan')

    def to_csv(self, path: PathLike) -> None:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['epoch', 'loss', 'metric', 'seconds'])
            for e in self.epochs:
                writer.writerow([e.epoch, f'{e.loss:.8g}', f'{e.metric:.8g}', f'{e.seconds:.6f}'])


def train(
    net: NetworkGraph,
    source: BatchSource,
    lr: float = 1e-3,
    epochs: int = 1,
    rng: Optional[RngStream] = None,
    batch_size: int = DEFAULT_BATCH_SIZE,
    progress: bool = True,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[NetworkGraph, TrainMetrics]:
    """
    Train the learned parameters of ``net`` with Adam.

    Fixed parameters never require gradients and are checked byte-for-byte
    after the run.

    Parameters
    ----------
    net : NetworkGraph
        Network to train; it is not modified.
    source : BatchSource
        Training data; its ``task`` selects the loss.
    lr : float, optional
        Learning rate, by default 1e-3. Zero gives a null update.
    epochs : int, optional
        Number of passes over ``source``, by default 1.
    rng : RngStream, optional
        Shuffling stream, by default ``RngStream(0)``.
    batch_size : int, optional
        Minibatch size, by default 8.
    progress : bool, optional
        Show a tqdm progress bar, by default True.
    on_epoch : callable, optional
        Called with every finished :class:`EpochRecord`.

    Returns
    -------
    net : NetworkGraph
        Trained network.
    metrics : TrainMetrics
        Per-epoch loss, metric and wall-clock seconds (metric evaluated after
        the timed part of the epoch).

    Raises
    ------
    DivergenceError
        If a loss is not finite.
    FixedParameterError
        If a fixed tensor changed.
    """
    if lr < 0:
        raise ConfigError(f"Learning rate must be non-negative, got {lr}")
    if epochs < 0 or batch_size < 1:
        raise ConfigError(f"Invalid epochs={epochs} or batch_size={batch_size}")
    rng = rng if rng is not None else RngStream(0)
    snapshot = fixed_snapshot(net)
    counts = source.class_counts()

    executor = Executor(net, training=True, track_fixed=False)
    learned = executor.parameters()
    optimizer = None
    if learned:
        optimizer = torch.optim.Adam(learned, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    logger.info(
        f"Training {sum(t.numel() for t in learned)} learned parameters "
        f"({net.num_parameters(spatial=True)} spatial, "
        f"{sum(p.size for p in net.params if p.fixed)} fixed) for {epochs} epochs, lr={lr:g}"
    )

    metrics = TrainMetrics()
    for epoch in tqdm(range(epochs), desc='train', disable=not progress):
        executor.training = True
        start = time.perf_counter()
        losses = []
        for batch in source.batches(batch_size, rng.derive(epoch)):
            if optimizer is not None:
                optimizer.zero_grad(set_to_none=True)
            loss = task_loss(source.task, executor(batch.inputs), batch, counts)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"Loss became {float(loss)} at epoch {epoch}; lower the learning rate "
                    f"(currently {lr:g})"
                )
            if optimizer is not None:
                loss.backward()
                optimizer.step()
            executor.reset()
            losses.append(float(loss.detach()))
        seconds = time.perf_counter() - start
        result = _evaluate_executor(executor, source, batch_size)
        mean_loss = float(np.mean(losses)) if losses else float('nan')
        record = EpochRecord(epoch, mean_loss, result.metric, seconds)
        metrics.epochs.append(record)
        logger.debug(
            f"epoch {epoch}: loss={record.loss:.5f} metric={record.metric:.4f} ({seconds:.3f}s)"
        )
        if on_epoch is not None:
            on_epoch(record)

    trained = executor.export()
    changed = [k for k, v in fixed_snapshot(trained).items() if snapshot.get(k) != v]
    if changed or set(snapshot) != set(fixed_snapshot(trained)):
        raise FixedParameterError(f"Fixed parameters changed during training: {changed}")
    return trained, metrics
