"""
Synthetic datasets for desk-scale experiments.

``shapes-seg``
    Grayscale images of random ellipses and rectangles with their binary
    foreground masks (segmentation).
``blobs-cls5``
    Grayscale images in which each of five texture classes is present with
    probability one half, with 5-bit labels and a label bitmask where about
    10% of the labels are marked uncertain (multi-label classification).

Datasets are stored as ``.sfd`` files: a magic line, a one-line JSON header
and the arrays in ``.npy`` format.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np
from skimage.draw import disk, ellipse, rectangle

from .engine import Batch
from .errors import ConfigError, SerializationError
from .numerics import RngStream
from .utils import PathLike

logger = logging.getLogger(__name__)

MAGIC = b"STEERFIX-DATASET\n"
DATASET_SUFFIX = ".sfd"
DATASET_KINDS = ("shapes-seg", "blobs-cls5")
DEFAULT_IMAGE_SIZE = 32
NUM_TEXTURE_CLASSES = 5
UNCERTAIN_RATE = 0.1
NOISE_STD = 0.05


@dataclass
class Dataset:
    """
    In-memory dataset that yields :class:`~steerfix.engine.Batch` objects.

    Parameters
    ----------
    kind : str
        One of ``DATASET_KINDS``.
    images : np.ndarray
        ``(N, 1, H, W)`` float32 images in ``[0, 1]``.
    targets : np.ndarray
        ``(N, 1, H, W)`` masks or ``(N, 5)`` labels.
    mask : np.ndarray, optional
        Label bitmask shaped like ``targets``.
    seed : int, optional
        Generating seed, recorded in the file header.
    """

    kind: str
    images: np.ndarray
    targets: np.ndarray
    mask: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(
                f"Unknown dataset kind '{self.kind}', expected one of {DATASET_KINDS}"
            )

    @property
    def task(self) -> str:
        return "segmentation" if self.kind == "shapes-seg" else "multilabel"

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def batches(self, batch_size: int, rng: Optional[RngStream] = None) -> Iterator[Batch]:
        """Consecutive minibatches, shuffled when ``rng`` is given."""
        n = len(self)
        order = rng.permutation(n) if rng is not None and n else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield Batch(
                self.images[idx],
                self.targets[idx],
                None if self.mask is None else self.mask[idx],
            )

    def class_counts(self) -> Optional[np.ndarray]:
        """
        ``(2, T)`` positive/negative counts of the certain labels.

        Counts are floored at one so the balancing weights stay finite.
        Segmentation data has no per-task counts and returns None.
        """
        if self.task != "multilabel":
            return None
        mask = np.ones_like(self.targets) if self.mask is None else self.mask
        positive = np.sum(mask * (self.targets > 0.5), axis=0)
        negative = np.sum(mask * (self.targets <= 0.5), axis=0)
        return np.maximum(np.stack([positive, negative]), 1.0)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.kind,
            self.images[idx],
            self.targets[idx],
            None if self.mask is None else self.mask[idx],
            self.seed,
        )


def _shapes_sample(size: int, rng: RngStream) -> Tuple[np.ndarray, np.ndarray]:
    g = rng.generator()
    foreground = np.zeros((size, size), dtype=bool)
    for _ in range(int(g.integers(1, 4))):
        center = g.uniform(0.2 * size, 0.8 * size, 2)
        if g.random() < 0.5:
            radii = g.uniform(0.1 * size, 0.3 * size, 2)
            rr, cc = ellipse(
                center[0], center[1], radii[0], radii[1],
                shape=foreground.shape, rotation=g.uniform(-np.pi, np.pi),
            )
        else:
            half = g.uniform(0.08 * size, 0.25 * size, 2)
            start = np.clip(np.round(center - half), 0, size - 1).astype(int)
            end = np.clip(np.round(center + half), 0, size - 1).astype(int)
            rr, cc = rectangle(tuple(start), end=tuple(end), shape=foreground.shape)
        foreground[rr, cc] = True
    background = g.uniform(0.0, 0.3)
    level = g.uniform(0.6, 1.0)
    image = np.where(foreground, level, background) + g.normal(0.0, NOISE_STD, foreground.shape)
    return np.clip(image, 0.0, 1.0), foreground.astype(np.float32)


def _texture(kind: int, size: int, phase: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 0:
        return 0.5 + 0.5 * np.cos(np.pi / 2 * y + phase)
    if kind == 1:
        return 0.5 + 0.5 * np.cos(np.pi / 2 * x + phase)
    if kind == 2:
        return 0.5 + 0.5 * np.cos(np.pi / 3 * (x + y) + phase)
    if kind == 3:
        return ((np.floor(x / 2) + np.floor(y / 2)) % 2).astype(np.float64)
    return 0.5 + 0.5 * np.cos(np.pi * x + phase) * np.cos(np.pi * y + phase)


def _blobs_sample(size: int, rng: RngStream) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    g = rng.generator()
    labels = (g.random(NUM_TEXTURE_CLASSES) < 0.5).astype(np.float32)
    certain = (g.random(NUM_TEXTURE_CLASSES) >= UNCERTAIN_RATE).astype(np.float32)
    image = np.full((size, size), g.uniform(0.1, 0.3))
    for k in np.flatnonzero(labels):
        center = g.uniform(0.25 * size, 0.75 * size, 2)
        radius = g.uniform(0.15 * size, 0.3 * size)
        rr, cc = disk(tuple(center), radius, shape=image.shape)
        image[rr, cc] = _texture(int(k), size, g.uniform(0, 2 * np.pi))[rr, cc]
    image = np.clip(image + g.normal(0.0, NOISE_STD, image.shape), 0.0, 1.0)
    return image, labels, certain


def generate_dataset(
    kind: str, n: int, seed: int = 0, size: int = DEFAULT_IMAGE_SIZE
) -> Dataset:
    """
    Generate ``n`` samples of a synthetic dataset.

    Sample ``i`` only depends on ``(seed, i)``, so a dataset of ``n`` samples
    is a prefix of one with more samples.

    Parameters
    ----------
    kind : str
        ``shapes-seg`` or ``blobs-cls5``.
    n : int
        Number of samples (may be zero).
    seed : int, optional
        Generating seed, by default 0.
    size : int, optional
        Image side length, by default 32.

    Returns
    -------
    dataset : Dataset
        The generated samples.
    """
    if kind not in DATASET_KINDS:
        raise ConfigError(f"Unknown dataset kind '{kind}', expected one of {DATASET_KINDS}")
    if n < 0 or size < 4:
        raise ConfigError(f"Invalid dataset size n={n}, image size={size}")
    rng = RngStream(seed)
    images = np.zeros((n, 1, size, size), dtype=np.float32)
    if kind == "shapes-seg":
        targets = np.zeros((n, 1, size, size), dtype=np.float32)
        mask = None
        for i in range(n):
            images[i, 0], targets[i, 0] = _shapes_sample(size, rng.derive(i))
    else:
        targets = np.zeros((n, NUM_TEXTURE_CLASSES), dtype=np.float32)
        mask = np.zeros((n, NUM_TEXTURE_CLASSES), dtype=np.float32)
        for i in range(n):
            images[i, 0], targets[i], mask[i] = _blobs_sample(size, rng.derive(i))
    logger.info(f"Generated {n} '{kind}' samples of size {size}x{size} (seed {seed})")
    return Dataset(kind, images, targets, mask, seed)


def save_dataset(dataset: Dataset, path: PathLike) -> Path:
    """Write ``dataset`` as a ``.sfd`` file; equal datasets give equal bytes."""
    path = Path(path)
    if path.suffix != DATASET_SUFFIX:
        path = path.with_name(path.name + DATASET_SUFFIX)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"images": dataset.images, "targets": dataset.targets}
    if dataset.mask is not None:
        arrays["mask"] = dataset.mask
    header = {
        "kind": dataset.kind,
        "task": dataset.task,
        "count": len(dataset),
        "shape": list(dataset.images.shape[1:]),
        "dtype": "float32",
        "seed": int(dataset.seed),
        "arrays": list(arrays),
    }
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for array in arrays.values():
            np.save(f, np.ascontiguousarray(array, dtype=np.float32), allow_pickle=False)
    return path


def load_dataset(path: PathLike) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    with open(path, "rb") as f:
        if f.readline() != MAGIC:
            raise SerializationError(f"{path} is not a steerfix dataset file")
        try:
            header = json.loads(f.readline().decode("utf-8"))
            arrays = {name: np.load(f, allow_pickle=False) for name in header["arrays"]}
        except (ValueError, KeyError) as e:
            raise SerializationError(f"Corrupt dataset file {path}: {e}") from e
    if arrays["images"].shape[0] != header["count"]:
        raise SerializationError(
            f"{path}: header announces {header['count']} samples, found {arrays['images'].shape[0]}"
        )
    return Dataset(
        header["kind"], arrays["images"], arrays["targets"], arrays.get("mask"), header["seed"]
    )
