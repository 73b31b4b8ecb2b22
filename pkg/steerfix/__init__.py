"""steerfix: fixed spatial filters, spectral explanations and channel pruning for CNNs."""

from .channelprune import PruneReport, channel_prune, fill_zero, prune_zero_channels, repair_graph
from .cli import main
from .datasets import Dataset, generate_dataset, load_dataset, save_dataset
from .engine import Batch, evaluate, train
from .explainsteer import EnergySpectrum, SaliencyScores, explain_network, saliency
from .filterbank import FilterSpec, InitMethod, dct2_basis, generate_filters
from .loader import load_network, save_network
from .model import build_network, build_tiny_densenet, build_tiny_resnet, build_unetd
from .netgraph import NetworkGraph, apply_initializer, initializer_specs, validate_graph
from .numerics import RngStream

__all__ = [
    'Batch',
    'Dataset',
    'EnergySpectrum',
    'FilterSpec',
    'InitMethod',
    'NetworkGraph',
    'PruneReport',
    'RngStream',
    'SaliencyScores',
    'apply_initializer',
    'build_network',
    'build_tiny_densenet',
    'build_tiny_resnet',
    'build_unetd',
    'channel_prune',
    'dct2_basis',
    'evaluate',
    'explain_network',
    'fill_zero',
    'generate_dataset',
    'generate_filters',
    'initializer_specs',
    'load_dataset',
    'load_network',
    'main',
    'prune_zero_channels',
    'repair_graph',
    'saliency',
    'save_dataset',
    'save_network',
    'train',
    'validate_graph',
]
