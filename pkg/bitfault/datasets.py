"""
Image classification datasets: MNIST in IDX format, and a small synthetic set for smoke tests
"""
import logging
import os
import typing as ty

import numpy as np

from . import exceptions, parsers, readers
from .const import DATA_ENV_VAR, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, MNIST_FILES


logger = logging.getLogger(__name__)


class Dataset:
    """Images in [0, 1] on the 1/255 grid, shape (N, C, H, W), with integer labels"""
    __slots__ = ('images', 'labels', 'name')

    def __init__(self, images: np.ndarray, labels: np.ndarray, name: str = ''):
        images = np.asarray(images)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim == 3:
            images = images[:, None, :, :]
        if images.ndim != 4:
            raise exceptions.ShapeException('Images must have shape (N, C, H, W), got {}'.format(images.shape))
        if len(images) != len(labels):
            raise exceptions.ShapeException(
                'Found {} images but {} labels'.format(len(images), len(labels)))
        if not len(labels):
            raise exceptions.ConfigurationException('Dataset {} is empty'.format(name))
        if labels.min() < 0:
            raise exceptions.RangeException('Labels must be non-negative')
        self.images = images.astype(np.float32, copy=False)
        self.labels = labels
        self.name = name

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, start: int, stop: int = None) -> 'Dataset':
        """Contiguous slice; `subset(n)` is the first n examples"""
        if stop is None:
            start, stop = 0, start
        return Dataset(self.images[start:stop], self.labels[start:stop], name=self.name)

    def split(self, n: int) -> ty.Tuple['Dataset', 'Dataset']:
        """First n examples and the rest; eg. attack examples vs evaluation examples"""
        if not 0 < n < len(self):
            raise exceptions.RangeException('Split point {} is outside of (0, {})'.format(n, len(self)))
        return self.subset(0, n), self.subset(n, len(self))

    def arrays(self) -> ty.Tuple[np.ndarray, np.ndarray]:
        return self.images, self.labels

    def batches(self, batch_size: int, rng: np.random.Generator = None):
        return iterate_batches(self.images, self.labels, batch_size, rng)


def as_arrays(data) -> ty.Tuple[np.ndarray, np.ndarray]:
    """Accept a Dataset or an (images, labels) pair"""
    if isinstance(data, Dataset):
        return data.arrays()
    x, y = data
    return np.asarray(x), np.asarray(y)


def iterate_batches(x: np.ndarray, y: np.ndarray, batch_size: int,
                    rng: np.random.Generator = None) -> ty.Iterator[ty.Tuple[np.ndarray, np.ndarray]]:
    """Mini-batches in a random order (drawn from `rng`) or in storage order; the last batch may be short"""
    order = rng.permutation(len(y)) if rng is not None else np.arange(len(y))
    for start in range(0, len(y), batch_size):
        picked = order[start:start + batch_size]
        yield x[picked], y[picked]


def _find_file(root: str, name: str) -> str:
    for candidate in (name, name + '.gz'):
        path = os.path.join(root, candidate)
        if os.path.isfile(path):
            return path
    raise exceptions.ConfigurationException('Could not find {} in {}'.format(name, root))


def read_idx_pair(images_path: str, labels_path: str, name: str = '') -> Dataset:
    images = parsers.parse_idx(readers.read_bytes(images_path), expected_magic=IDX_IMAGES_MAGIC)
    labels = parsers.parse_idx(readers.read_bytes(labels_path), expected_magic=IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise exceptions.ParseException('{} holds {} labels but {} holds {} images'.format(
            labels_path, len(labels), images_path, len(images)))
    return Dataset(images.astype(np.float32) / 255, labels, name=name)


def resolve_data_root(path: str = None) -> str:
    """An explicit path, else the directory named by BITFAULT_DATA, else the downloaded `mnist` asset"""
    if path:
        return path
    if os.environ.get(DATA_ENV_VAR):
        return os.environ[DATA_ENV_VAR]
    from . import assets
    return assets.locate('mnist')


def load_mnist(path: str = None) -> ty.Dict[str, Dataset]:
    """
    Read the four standard MNIST files (optionally gzipped) from a directory

    :return: {'train': 60000 examples, 'test': 10000 examples}
    """
    root = resolve_data_root(path)
    out = {}
    for split, (images_name, labels_name) in MNIST_FILES.items():
        out[split] = read_idx_pair(_find_file(root, images_name), _find_file(root, labels_name),
                                   name='mnist-{}'.format(split))
        logger.debug('Loaded {} {} examples from {}'.format(len(out[split]), split, root))
    return out


def synthetic_digits(n: int, seed: int = 0, size: int = 12, num_classes: int = 10, noise: int = 24,
                     prototype_seed: int = 0) -> Dataset:
    """
    Class-dependent blob patterns on an 8-bit grid: each class lights a fixed random set of pixels, and every
        example adds integer noise before rounding to b / 255. Sets drawn with different `seed`s but the same
        `prototype_seed` share their classes (eg. train and test).
    """
    if n < 1:
        raise exceptions.RangeException('Need at least one example')
    prototypes = (np.random.default_rng(prototype_seed).random((num_classes, size, size)) < 0.3) * 200 + 30
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    images = prototypes[labels] + rng.integers(-noise, noise + 1, size=(n, size, size))
    images = np.clip(images, 0, 255).astype(np.uint8)
    return Dataset(images.astype(np.float32) / 255, labels, name='synthetic')


def attack_eval_split(test: Dataset, attack_examples: int, eval_examples: int = None) -> ty.Tuple[Dataset, Dataset]:
    """
    The first `attack_examples` test examples drive the attack; the (up to `eval_examples`) examples after them
        score it, so the restart is never selected on the examples it is scored on
    """
    attack_set, rest = test.split(attack_examples)
    if eval_examples is not None and eval_examples < len(rest):
        rest = rest.subset(eval_examples)
    return attack_set, rest
