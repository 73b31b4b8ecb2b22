"""
Command-line interface.

Every command writes its outputs and the resolved ``run_config.json`` into
``--out``. Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric
error.
"""

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .channelprune import channel_prune, zero_sweep
from .datasets import DATASET_KINDS, Dataset, generate_dataset, load_dataset, save_dataset
from .engine import evaluate, train
from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    DomainError,
    EngineError,
    FixedParameterError,
    GraphError,
    SerializationError,
    UnsupportedError,
)
from .explainsteer import (
    SALIENCY_BATCH_SIZE,
    SALIENCY_BATCHES,
    SaliencyScores,
    explain_network,
    saliency,
    saliency_batches,
    write_reports,
)
from .filterbank import FilterSpec, InitMethod, generate_filters
from .loader import load_network, save_filter_bank, save_network
from .model import ARCHITECTURES, build_network, unetd_reference_report
from .netgraph import NetworkGraph, apply_initializer, initializer_specs, spatial_layers
from .numerics import RngStream
from .svg import filter_grid_svg
from .utils import ensure_dir, get_logger, parse_shape, thread_count

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

PRUNED_LR_MULTIPLIER = 2.0
DEFAULT_SWEEP_FRACTIONS = (0.0, 0.03, 0.1, 0.25, 0.5, 0.75, 0.9)
CONFIG_FILENAME = 'run_config.json'
NETWORK_STEM = 'net'


@dataclass
class RunConfig:
    """
    Resolved parameters of one command.

    Values come from the defaults below, then an optional JSON config file,
    then command-line flags.
    """

    command: str = ''
    seed: int = 0
    out: str = 'out'
    verbose: bool = False
    network: Optional[str] = None
    architecture: str = 'unetd'
    method: str = 'ghaar'
    guide: Optional[str] = None
    distribution: str = 'kde'
    centered: bool = False
    shape: str = '3x3'
    count: int = 16
    kind: str = 'shapes-seg'
    n: int = 64
    image_size: int = 32
    dataset: Optional[str] = None
    lr: float = 1e-3
    lr_multiplier: Optional[float] = None
    epochs: int = 1
    batch_size: int = 8
    fraction: float = 0.0
    fillzero: bool = True
    saliency: bool = False
    most_salient_first: bool = False
    fractions: Tuple[float, ...] = DEFAULT_SWEEP_FRACTIONS
    seeds: int = 6
    methods: Tuple[str, ...] = ('ghaar', 'dct2')

    @classmethod
    def from_file(cls, path: str) -> 'RunConfig':
        try:
            data = json.loads(Path(path).read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must contain a JSON object")
        return cls().merged(data)

    def merged(self, overrides: Dict[str, Any]) -> 'RunConfig':
        names = {f.name for f in dataclasses.fields(self)}
        unknown = sorted(set(overrides) - names)
        if unknown:
            raise ConfigError(f"Unknown configuration keys {unknown}")
        values = dict(overrides)
        for key in ('fractions', 'methods'):
            if key in values:
                values[key] = tuple(values[key])
        return dataclasses.replace(self, **values)

    def save(self, out_dir: Path) -> Path:
        path = out_dir / CONFIG_FILENAME
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + '\n')
        return path


def _require(value: Optional[str], flag: str) -> str:
    if not value:
        raise ConfigError(f"Missing required option {flag}")
    return value


def _dataset(config: RunConfig) -> Dataset:
    return load_dataset(_require(config.dataset, '--dataset'))


def _guide_kernels(guide: NetworkGraph, shape: Tuple[int, int]) -> np.ndarray:
    kernels = [
        guide.param(node.id, 'weight').tensor.reshape((-1,) + shape)
        for node in spatial_layers(guide)
        if node.kernel == shape
    ]
    if not kernels:
        raise DimensionError(f"Guide network has no {shape[0]}x{shape[1]} spatial layers")
    return np.concatenate(kernels)


def _scores(net: NetworkGraph, data: Dataset, seed: int) -> SaliencyScores:
    rng = RngStream(seed).derive(1)
    batches = saliency_batches(data, rng, SALIENCY_BATCHES, SALIENCY_BATCH_SIZE)
    return saliency(net, batches)


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_build(config: RunConfig, out: Path) -> None:
    net = build_network(config.architecture, seed=config.seed)
    save_network(net, out / NETWORK_STEM)
    if config.architecture == 'unetd':
        unetd_reference_report(net)
    rows = [(block, *counts) for block, counts in net.parameter_breakdown().items()]
    rows.append(('total', net.num_parameters(), net.num_parameters(spatial=True)))
    _write_rows(out / 'params.csv', ['block', 'params', 'spatial'], rows)


def cmd_gen_filters(config: RunConfig, out: Path) -> None:
    try:
        shape = parse_shape(config.shape)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    try:
        method = InitMethod(config.method)
    except ValueError:
        raise ConfigError(f"Unknown initialization method '{config.method}'") from None
    guide = None
    count = config.count
    if method.requires_guide:
        guide = _guide_kernels(load_network(_require(config.guide, '--guide')), shape)
        if method is InitMethod.UNCHANGED_GUIDE:
            count = len(guide)
    spec = FilterSpec(
        method,
        shape,
        count,
        seed=config.seed,
        guide=guide,
        distribution=config.distribution,
        centered=config.centered,
    )
    kernels = generate_filters(spec)
    save_filter_bank(kernels, out / 'filters', method.value, config.seed)
    (out / 'filters.svg').write_text(filter_grid_svg(kernels))
    logger.info(f"Generated {len(kernels)} {method.value} kernels of size {config.shape}")


def cmd_gen_data(config: RunConfig, out: Path) -> None:
    if config.kind not in DATASET_KINDS:
        raise ConfigError(f"Unknown dataset kind '{config.kind}', choose from {DATASET_KINDS}")
    dataset = generate_dataset(config.kind, config.n, seed=config.seed, size=config.image_size)
    save_dataset(dataset, out / 'data')


def cmd_init(config: RunConfig, out: Path) -> None:
    if config.network:
        net = load_network(config.network)
    else:
        net = build_network(config.architecture, seed=config.seed)
    guide = load_network(config.guide) if config.guide else None
    specs = initializer_specs(
        net,
        config.method,
        seed=config.seed,
        guide=guide,
        distribution=config.distribution,
        centered=config.centered,
    )
    net = apply_initializer(net, specs).with_meta(initializer=config.method)
    save_network(net, out / NETWORK_STEM)


def cmd_train(config: RunConfig, out: Path) -> None:
    net = load_network(_require(config.network, 'network'))
    data = _dataset(config)
    multiplier = config.lr_multiplier
    if multiplier is None:
        multiplier = PRUNED_LR_MULTIPLIER if net.meta.get('pruned') else 1.0
    lr = config.lr * multiplier
    if multiplier != 1.0:
        logger.info(f"Using learning rate {lr:g} ({multiplier:g} x {config.lr:g})")
    trained, metrics = train(
        net,
        data,
        lr=lr,
        epochs=config.epochs,
        rng=RngStream(config.seed),
        batch_size=config.batch_size,
    )
    save_network(trained, out / NETWORK_STEM)
    metrics.to_csv(out / 'metrics.csv')
    logger.info(
        f"Final metric {metrics.final_metric:.4f}, {metrics.seconds_per_epoch:.3f}s per epoch"
    )


def cmd_explain(config: RunConfig, out: Path) -> None:
    net = load_network(_require(config.network, 'network'))
    scores = None
    if config.saliency:
        scores = _scores(net, _dataset(config), config.seed)
        rows = []
        for node_id, layer in scores.scores.items():
            for (o, i), value in np.ndenumerate(layer):
                rows.append((node_id, o, i, f'{value:.10g}'))
        _write_rows(out / 'saliency.csv', ['layer', 'out', 'in', 'score'], rows)
    write_reports(explain_network(net, saliency=scores), out)


def cmd_prune(config: RunConfig, out: Path) -> None:
    net = load_network(_require(config.network, 'network'))
    scores = _scores(net, _dataset(config), config.seed)
    pruned, report = channel_prune(
        net, scores, config.fraction, RngStream(config.seed).derive(2), fill=config.fillzero
    )
    save_network(pruned, out / NETWORK_STEM)
    (out / 'prune_report.json').write_text(report.to_json())


def cmd_eval(config: RunConfig, out: Path) -> None:
    net = load_network(_require(config.network, 'network'))
    result = evaluate(net, _dataset(config), batch_size=config.batch_size)
    _write_rows(
        out / 'eval.csv', ['metric', 'loss'], [(f'{result.metric:.8g}', f'{result.loss:.8g}')]
    )
    logger.info(f"metric={result.metric:.4f} loss={result.loss:.5f}")


def cmd_zero_sweep(config: RunConfig, out: Path) -> None:
    net = load_network(_require(config.network, 'network'))
    data = _dataset(config)
    curve = zero_sweep(
        net,
        _scores(net, data, config.seed),
        config.fractions,
        data,
        most_salient_first=config.most_salient_first,
    )
    order = 'most-salient-first' if config.most_salient_first else 'least-salient-first'
    _write_rows(
        out / 'sweep.csv',
        ['order', 'fraction', 'metric'],
        [(order, f'{f:.6g}', f'{m:.8g}') for f, m in curve],
    )


def cmd_compare_inits(config: RunConfig, out: Path) -> None:
    """Train one fixed-filter network per method and seed and compare final metrics."""
    data = _dataset(config)
    if len(config.methods) < 2:
        raise ConfigError("compare-inits needs at least two methods")
    rows: List[Tuple[str, int, float, float]] = []
    for method in config.methods:
        for seed in range(config.seed, config.seed + config.seeds):
            net = build_network(config.architecture, seed=seed)
            net = apply_initializer(net, initializer_specs(net, method, seed=seed))
            _, metrics = train(
                net,
                data,
                lr=config.lr,
                epochs=config.epochs,
                rng=RngStream(seed),
                batch_size=config.batch_size,
                progress=False,
            )
            rows.append((method, seed, metrics.final_metric, metrics.seconds_per_epoch))
            logger.info(f"{method} seed {seed}: metric {metrics.final_metric:.4f}")
    _write_rows(
        out / 'compare.csv',
        ['method', 'seed', 'final_metric', 'seconds_per_epoch'],
        [(m, s, f'{v:.8g}', f'{t:.6f}') for m, s, v, t in rows],
    )
    means = {m: float(np.mean([v for mm, _, v, _ in rows if mm == m])) for m in config.methods}
    first, second = config.methods[0], config.methods[1]
    summary = {
        'mean_final_metric': means,
        'holds': means[first] >= means[second],
        'claim': f"mean({first}) >= mean({second})",
    }
    if not summary['holds']:
        logger.warning(f"{summary['claim']} does not hold on this data: {means}")
    (out / 'compare_summary.json').write_text(json.dumps(summary, indent=2) + '\n')


COMMANDS: Dict[str, Tuple[Callable[[RunConfig, Path], None], str]] = {
    'build': (cmd_build, 'Build a freshly initialized reference network'),
    'gen-filters': (cmd_gen_filters, 'Generate a bank of spatial filters'),
    'gen-data': (cmd_gen_data, 'Generate a synthetic dataset'),
    'init': (cmd_init, 'Initialize and fix the spatial filters of a network'),
    'train': (cmd_train, 'Train the learned parameters of a network'),
    'explain': (cmd_explain, 'Write energy spectra and heatmaps of a network'),
    'prune': (cmd_prune, 'Zero the least salient kernels and prune zero channels'),
    'eval': (cmd_eval, 'Evaluate a network on a dataset'),
    'zero-sweep': (cmd_zero_sweep, 'Metric after zeroing increasing fractions of kernels'),
    'compare-inits': (cmd_compare_inits, 'Compare fixed-filter initializations over seeds'),
}


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument('--seed', type=int, help='Master seed (default: 0)')
    common.add_argument('--config', dest='config_file', help='JSON file with option values')
    common.add_argument('--out', help='Output directory (default: out)')
    common.add_argument('-v', '--verbose', action='store_true', help='Log debug messages')
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog='steerfix',
        description='Fixed spatial filters, spectral explanations and channel pruning.',
        parents=[common],
        argument_default=argparse.SUPPRESS,
    )
    sub = parser.add_subparsers(dest='command', required=True)
    subs = {
        name: sub.add_parser(name, help=text, parents=[common], argument_default=argparse.SUPPRESS)
        for name, (_, text) in COMMANDS.items()
    }

    for name in ('init', 'train', 'explain', 'prune', 'eval', 'zero-sweep'):
        required = '?' if name == 'init' else None
        subs[name].add_argument('network', nargs=required, help='Network (.nfg/.nfw stem)')
    for name in ('train', 'explain', 'prune', 'eval', 'zero-sweep', 'compare-inits'):
        subs[name].add_argument('--dataset', help='Dataset file (.sfd)')
    for name in ('build', 'init', 'compare-inits'):
        subs[name].add_argument('--architecture', choices=sorted(ARCHITECTURES))
    for name in ('gen-filters', 'init'):
        p = subs[name]
        p.add_argument('--method', choices=[m.value for m in InitMethod])
        p.add_argument('--guide', help='Guide network for unchanged-guide and guided-steer')
        p.add_argument('--distribution', choices=['kde', 'normal'])
        p.add_argument('--centered', action='store_true')
    for name in ('train', 'compare-inits'):
        p = subs[name]
        p.add_argument('--lr', type=float)
        p.add_argument('--epochs', type=int)
    for name in ('train', 'eval', 'compare-inits'):
        subs[name].add_argument('--batch-size', dest='batch_size', type=int)

    subs['gen-filters'].add_argument('--shape', help='Kernel shape, e.g. 3x3')
    subs['gen-filters'].add_argument('--count', type=int)
    subs['gen-data'].add_argument('--kind', choices=list(DATASET_KINDS))
    subs['gen-data'].add_argument('--n', type=int, help='Number of samples')
    subs['gen-data'].add_argument('--image-size', dest='image_size', type=int)
    subs['train'].add_argument(
        '--lr-multiplier',
        dest='lr_multiplier',
        type=float,
        help=f'Learning-rate multiplier (default: {PRUNED_LR_MULTIPLIER:g} for pruned networks)',
    )
    subs['explain'].add_argument(
        '--saliency', action='store_true', help='Weight kernels by saliency on --dataset'
    )
    subs['prune'].add_argument('--fraction', type=float, help='Fraction of kernels to zero')
    subs['prune'].add_argument('--no-fillzero', dest='fillzero', action='store_false')
    subs['zero-sweep'].add_argument('--fractions', type=float, nargs='+')
    subs['zero-sweep'].add_argument(
        '--most-salient-first', dest='most_salient_first', action='store_true'
    )
    subs['compare-inits'].add_argument('--seeds', type=int, help='Number of seeds')
    subs['compare-inits'].add_argument(
        '--methods', nargs='+', choices=[m.value for m in InitMethod]
    )
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = vars(args).copy()
    config_file = values.pop('config_file', None)
    config = RunConfig.from_file(config_file) if config_file else RunConfig()
    return config.merged(values)


def exit_code(error: BaseException) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, (OSError, SerializationError)):
        return EXIT_IO
    numeric = (
        DivergenceError, DomainError, DimensionError, GraphError,
        EngineError, FixedParameterError, UnsupportedError,
    )
    if isinstance(error, numeric):
        return EXIT_NUMERIC
    raise error


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    try:
        config = resolve_config(args)
        get_logger(logging.DEBUG if config.verbose else logging.INFO)
        torch.set_num_threads(thread_count())
        out = ensure_dir(config.out)
        config.save(out)
        COMMANDS[config.command][0](config, out)
    except Exception as e:
        code = exit_code(e)
        logger.error(f"{type(e).__name__}: {e}")
        return code
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> None:
    sys.exit(run(argv))
