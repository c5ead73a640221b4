"""Synthetic classification data and Dirichlet non-IID partitioning."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PartitionMode(str, enum.Enum):
    NONIID = "noniid"
    IID = "iid"


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (samples, features) matching labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels out of range")
        if np.isnan(self.features).any():
            raise ValueError("NaN features")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass
class PartitionSpec:
    n_clients: int
    alpha: float = 0.6
    seed: int = 0
    mode: PartitionMode = PartitionMode.NONIID
    test_fraction: float = 0.2

    def __post_init__(self):
        self.mode = PartitionMode(self.mode)
        if self.n_clients < 1:
            raise ValueError("n_clients must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    def to_dict(self) -> dict:
        return {"n_clients": self.n_clients, "alpha": self.alpha, "seed": self.seed,
                "mode": self.mode.value, "test_fraction": self.test_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionSpec":
        return cls(**d)


@dataclass
class Partition:
    shards: list          # one index array per client, into the full dataset
    test: np.ndarray      # shared held-out indices

    @property
    def train(self) -> np.ndarray:
        return np.sort(np.concatenate(self.shards)) if self.shards else np.array([], dtype=np.int64)


class PartitionError(ValueError):
    pass


def generate_synthetic(classes: int, features: int, samples_per_class: int, seed: int) -> Dataset:
    """Gaussian blobs: one unit-covariance cluster per class, means on a radius-3 sphere."""
    if min(classes, features, samples_per_class) < 1:
        raise ValueError("all arguments must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, features))
    means *= 3.0 / np.linalg.norm(means, axis=1, keepdims=True)
    X = np.repeat(means, samples_per_class, axis=0) + rng.standard_normal(
        (classes * samples_per_class, features))
    y = np.repeat(np.arange(classes), samples_per_class)
    order = rng.permutation(y.size)
    return Dataset(X[order], y[order], classes)


def _stratified_test_split(labels, class_count, fraction, rng):
    test, train = [], []
    for c in range(class_count):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(fraction * idx.size))
        test.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(test)), train


def _dirichlet_shards(train_by_class, n_clients, alpha, rng):
    buckets = [[] for _ in range(n_clients)]
    for idx in train_by_class:
        p = rng.dirichlet(np.full(n_clients, alpha))
        cuts = (np.cumsum(p) * idx.size).astype(int)[:-1]
        for client, part in enumerate(np.split(rng.permutation(idx), cuts)):
            buckets[client].append(part)
    return [np.sort(np.concatenate(b)) for b in buckets]


def partition(ds: Dataset, spec: PartitionSpec) -> Partition:
    """Carve a stratified test split, then split the rest across clients.

    Non-IID mode draws, per class, client proportions from
    Dirichlet(alpha, ..., alpha) and deals that class's samples out
    accordingly. Draws that leave a client empty are retried with the next
    sub-seed, up to 100 times.
    """
    counts = np.bincount(ds.labels, minlength=ds.class_count)
    if counts.min() < spec.n_clients:
        raise PartitionError(f"need at least {spec.n_clients} samples per class")
    rng = np.random.default_rng([spec.seed, 0])
    test, train_by_class = _stratified_test_split(ds.labels, ds.class_count, spec.test_fraction, rng)

    if spec.mode is PartitionMode.IID:
        train = rng.permutation(np.concatenate(train_by_class))
        shards = [np.sort(s) for s in np.array_split(train, spec.n_clients)]
        return Partition(shards, test)

    for attempt in range(100):
        sub = np.random.default_rng([spec.seed, 1 + attempt])
        shards = _dirichlet_shards(train_by_class, spec.n_clients, spec.alpha, sub)
        if all(s.size > 0 for s in shards):
            return Partition(shards, test)
    raise PartitionError(f"no partition without empty clients after 100 draws (alpha={spec.alpha})")


def class_shares(ds: Dataset, part: Partition) -> np.ndarray:
    """(clients x classes) matrix of each client's label distribution."""
    out = np.zeros((len(part.shards), ds.class_count))
    for i, s in enumerate(part.shards):
        if s.size:
            out[i] = np.bincount(ds.labels[s], minlength=ds.class_count) / s.size
    return out


def heterogeneity(ds: Dataset, part: Partition) -> float:
    """Mean over clients of the largest single-class share."""
    return float(class_shares(ds, part).max(axis=1).mean())


def save_csv(ds: Dataset, path) -> None:
    path = Path(path)
    k = ds.features.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(k)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path, class_count: int | None = None) -> Dataset:
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[-1] != "label":
            raise ValueError("last column must be 'label'")
        rows = list(r)
    X = np.array([[float(v) for v in row[:-1]] for row in rows]).reshape(len(rows), len(header) - 1)
    y = np.array([int(row[-1]) for row in rows], dtype=np.int64)
    if class_count is None:
        class_count = int(y.max()) + 1 if y.size else 1
    return Dataset(X, y, class_count)
