import numpy as np
import pytest

from steerfix.datasets import (
    MAGIC,
    NUM_TEXTURE_CLASSES,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from steerfix.errors import ConfigError, SerializationError
from steerfix.numerics import RngStream


def test_empty_dataset_round_trip(tmp_path):
    path = save_dataset(generate_dataset('blobs-cls5', 0, seed=1), tmp_path / 'empty')
    assert path.name == 'empty.sfd'
    loaded = load_dataset(path)
    assert len(loaded) == 0 and loaded.kind == 'blobs-cls5'
    assert list(loaded.batches(4)) == []


def test_same_seed_gives_identical_bytes(tmp_path):
    a = save_dataset(generate_dataset('shapes-seg', 4, seed=3, size=16), tmp_path / 'a.sfd')
    b = save_dataset(generate_dataset('shapes-seg', 4, seed=3, size=16), tmp_path / 'b.sfd')
    c = save_dataset(generate_dataset('shapes-seg', 4, seed=4, size=16), tmp_path / 'c.sfd')
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()
    assert a.read_bytes().startswith(MAGIC)


def test_round_trip_keeps_arrays(tmp_path, blobs):
    loaded = load_dataset(save_dataset(blobs, tmp_path / 'blobs'))
    assert np.array_equal(loaded.images, blobs.images)
    assert np.array_equal(loaded.targets, blobs.targets)
    assert np.array_equal(loaded.mask, blobs.mask)
    assert loaded.seed == blobs.seed and loaded.task == 'multilabel'


def test_blob_labels_are_balanced():
    data = generate_dataset('blobs-cls5', 1000, seed=0, size=16)
    positives = data.targets.sum(axis=0)
    assert positives.shape == (NUM_TEXTURE_CLASSES,)
    assert np.all((positives >= 430) & (positives <= 570))
    uncertain = 1.0 - data.mask.mean()
    assert 0.05 < uncertain < 0.15


def test_shapes_are_well_formed(shapes):
    assert shapes.images.shape == shapes.targets.shape == (8, 1, 32, 32)
    assert shapes.images.min() >= 0.0 and shapes.images.max() <= 1.0
    assert set(np.unique(shapes.targets)) <= {0.0, 1.0}
    assert shapes.targets.sum() > 0
    assert shapes.class_counts() is None and shapes.task == 'segmentation'


def test_shuffled_batches_cover_every_sample(blobs):
    seen = []
    for batch in blobs.batches(5, RngStream(2)):
        assert len(batch) <= 5
        seen.extend(batch.inputs[:, 0, 0, 0].tolist())
    assert sorted(seen) == sorted(blobs.images[:, 0, 0, 0].tolist())
    assert [len(b) for b in blobs.batches(5)] == [5, 5, 5, 1]


def test_class_counts(blobs):
    counts = blobs.class_counts()
    assert counts.shape == (2, NUM_TEXTURE_CLASSES)
    assert np.all(counts >= 1)
    assert np.all(counts.sum(axis=0) <= len(blobs) + 1)


def test_smaller_dataset_is_a_prefix():
    small = generate_dataset('blobs-cls5', 3, seed=5, size=16)
    large = generate_dataset('blobs-cls5', 6, seed=5, size=16)
    assert np.array_equal(small.images, large.images[:3])
    assert np.array_equal(large.subset([0, 1, 2]).targets, small.targets)


def test_dataset_errors(tmp_path):
    with pytest.raises(ConfigError):
        generate_dataset('mnist', 4)
    with pytest.raises(ConfigError):
        generate_dataset('shapes-seg', -1)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / 'missing.sfd')
    bad = tmp_path / 'bad.sfd'
    bad.write_bytes(b'NOT-A-DATASET\n{}\n')
    with pytest.raises(SerializationError):
        load_dataset(bad)
