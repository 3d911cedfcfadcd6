"""Dataset loading, splitting and augmentation.

Two sources: the CIFAR-10 binary layout (1 label byte + 3072 pixel bytes per
record, planes R then G then B, row-major) normalized to [-1, +1] via
x/127.5 - 1, and a seeded synthetic generator producing class-conditional
Gaussian blobs that stay nearest-mean separable for noise below a computed
threshold.

The training pool is split into two equal halves (weight training and
architecture validation); the performance-validation subset is drawn from the
weight-training half and excluded from its gradient batches.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .util import make_rng, one_hot

CIFAR_RECORD = 3073
CIFAR_CLASSES = 10


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 2
    size: int = 16
    channels: int = 3
    count: int = 1000
    test_count: int = 400
    sigma: float = 0.1
    contrast: float = 0.2


def _balanced_labels(count, classes):
    labels = np.arange(count) % classes
    return np.sort(labels).astype(np.int64)


def make_synthetic(spec, seed):
    """Deterministic blob dataset.  Returns (train, test, info) where each split
    is (images, labels) and info carries the class means and the noise level
    below which a nearest-mean classifier stays essentially perfect."""
    rng = make_rng(seed, 10)
    means = (rng.standard_normal((spec.classes, spec.channels, spec.size, spec.size))
             * spec.contrast).astype(np.float32)

    def draw(count):
        labels = _balanced_labels(count, spec.classes)
        noise = rng.standard_normal((count, spec.channels, spec.size, spec.size))
        images = (means[labels] + spec.sigma * noise).astype(np.float32)
        order = rng.permutation(count)
        return images[order], labels[order]

    train = draw(spec.count)
    test = draw(spec.test_count)
    dist = min(
        float(np.linalg.norm(means[i] - means[j]))
        for i in range(spec.classes)
        for j in range(i + 1, spec.classes)
    )
    info = {"means": means, "separability_sigma": dist / 6.0}
    return train, test, info


@dataclass
class Splits:
    """Index-based views into one training pool."""

    images: np.ndarray
    labels: np.ndarray
    weight_train: np.ndarray
    arch_val: np.ndarray
    perf_val: np.ndarray
    grad_train: np.ndarray  # weight_train minus perf_val; feeds gradient batches

    def data(self, role):
        idx = getattr(self, role)
        return self.images[idx], self.labels[idx]


def split_pool(images, labels, seed, perf_val_size=5000):
    """Equal-half split plus the held-out performance-validation subset."""
    n = labels.shape[0]
    half = n // 2
    if perf_val_size >= half:
        raise ShapeError(f"perf_val size {perf_val_size} exceeds the weight-train half {half}")
    rng = make_rng(seed, 11)
    order = rng.permutation(n)
    weight_train = np.sort(order[:half])
    arch_val = np.sort(order[half:])
    picks = rng.permutation(half)[:perf_val_size]
    perf_val = np.sort(weight_train[picks])
    grad_train = np.setdiff1d(weight_train, perf_val, assume_unique=True)
    return Splits(images=images, labels=labels, weight_train=weight_train,
                  arch_val=arch_val, perf_val=perf_val, grad_train=grad_train)


def parse_cifar_records(data):
    """Decode raw CIFAR-10 binary bytes into ((N,3,32,32) float32, labels)."""
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        raise ShapeError(f"CIFAR-10 file size {len(data)} is not a multiple of {CIFAR_RECORD}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    if labels.max(initial=0) >= CIFAR_CLASSES:
        raise ShapeError(f"label byte {labels.max()} out of range 0..9")
    images = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 127.5 - 1.0
    return images, labels


def load_cifar10(path):
    """Load the binary batches from a directory (train pool + test set) or a
    single file (treated as a train pool with an empty test set)."""
    if os.path.isfile(path):
        with open(path, "rb") as fh:
            train = parse_cifar_records(fh.read())
        empty = (np.zeros((0, 3, 32, 32), dtype=np.float32), np.zeros(0, dtype=np.int64))
        return train, empty
    names = sorted(
        f for f in os.listdir(path) if f.startswith("data_batch") and f.endswith(".bin")
    )
    if not names:
        raise ShapeError(f"no data_batch_*.bin files under {path!r}")
    parts = []
    for name in names:
        with open(os.path.join(path, name), "rb") as fh:
            parts.append(parse_cifar_records(fh.read()))
    train = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    test_path = os.path.join(path, "test_batch.bin")
    if os.path.exists(test_path):
        with open(test_path, "rb") as fh:
            test = parse_cifar_records(fh.read())
    else:
        test = (np.zeros((0, 3, 32, 32), dtype=np.float32), np.zeros(0, dtype=np.int64))
    return train, test


def augment(images, rng, pad=4, flip_p=0.5):
    """Random crop after zero padding plus horizontal flip; shape-preserving."""
    n, c, h, w = images.shape
    if pad:
        padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
        padded[:, :, pad:pad + h, pad:pad + w] = images
    else:
        padded = images
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < flip_p
    out = np.empty_like(images)
    for i in range(n):
        oy, ox = offsets[i]
        crop = padded[i, :, oy:oy + h, ox:ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def batch_stream(images, labels, classes, batch_size, indices=None, rng=None,
                 augment_rng=None, pad=4, flip_p=0.5):
    """Yield (x, one-hot targets) batches; seeded shuffle and augmentation are
    both optional."""
    idx = np.arange(labels.shape[0]) if indices is None else indices
    if rng is not None:
        idx = idx[rng.permutation(idx.size)]
    for start in range(0, idx.size, batch_size):
        chunk = idx[start:start + batch_size]
        x = images[chunk]
        if augment_rng is not None:
            x = augment(x, augment_rng, pad=pad, flip_p=flip_p)
        yield x, one_hot(labels[chunk], classes, images.dtype)
