"""Labeled datasets with injected label noise, splits and minibatch sampling."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"


class FormatError(ValueError):
    """Malformed dataset file."""


@dataclass(frozen=True)
class LabeledDataset:
    """Features with clean and noisy labels.

    ``corrupted[i]`` is true exactly when ``noisy_labels[i] != true_labels[i]``.
    """

    features: np.ndarray
    true_labels: np.ndarray
    noisy_labels: np.ndarray
    num_classes: int
    corrupted: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        true = np.asarray(self.true_labels, dtype=np.int64)
        noisy = np.asarray(self.noisy_labels, dtype=np.int64)
        feats = np.asarray(self.features, dtype=np.float64)
        if not (len(feats) == len(true) == len(noisy)):
            raise ValueError("features and labels must have the same length")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "true_labels", true)
        object.__setattr__(self, "noisy_labels", noisy)
        object.__setattr__(self, "corrupted", noisy != true)

    def __len__(self) -> int:
        return len(self.true_labels)

    @property
    def noise_fraction(self) -> float:
        return float(self.corrupted.mean()) if len(self) else 0.0

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.features[idx], self.true_labels[idx],
                              self.noisy_labels[idx], self.num_classes)

    def clean(self) -> "LabeledDataset":
        """Same samples with the noisy labels replaced by the true ones."""
        return replace(self, noisy_labels=self.true_labels)

    def to_csv(self, path) -> None:
        """Columns ``true_label,noisy_label,corrupted,f_0..f_{p-1}``."""
        flat = self.features.reshape(len(self), -1)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true_label", "noisy_label", "corrupted"]
                            + [f"f_{j}" for j in range(flat.shape[1])])
            for t, n, c, row in zip(self.true_labels, self.noisy_labels, self.corrupted, flat):
                writer.writerow([int(t), int(n), int(c)] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, num_classes: Optional[int] = None) -> "LabeledDataset":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        true, noisy = data[:, 0].astype(np.int64), data[:, 1].astype(np.int64)
        if num_classes is None:
            num_classes = int(max(true.max(), noisy.max())) + 1
        return cls(data[:, 3:], true, noisy, num_classes)


def make_blobs(classes: int, per_class: int, dim: int, separation: float,
               seed=0) -> LabeledDataset:
    """Unit-covariance Gaussian clusters with pairwise center distance ``separation``.

    Centers are scaled basis vectors when ``dim >= classes``; otherwise they
    are random directions pushed apart to the requested distance.
    """
    if classes < 2 or per_class < 1 or separation <= 0:
        raise ValueError("need classes >= 2, per_class >= 1 and separation > 0")
    rng = np.random.default_rng(seed)
    if dim >= classes:
        centers = np.eye(classes, dim) * separation / np.sqrt(2.0)
    else:
        centers = rng.normal(size=(classes, dim))
        dists = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        centers *= separation / dists[~np.eye(classes, dtype=bool)].min()
    labels = np.repeat(np.arange(classes), per_class)
    feats = centers[labels] + rng.normal(size=(len(labels), dim))
    order = rng.permutation(len(labels))
    return LabeledDataset(feats[order], labels[order], labels[order], classes)


def load_cifar_binary(paths, num_classes: int = 10, standardize: bool = False) -> LabeledDataset:
    """Read CIFAR-style binary batches (1 label byte + 3072 pixel bytes per record).

    Pixels are scaled to [0, 1]; ``standardize`` additionally applies
    per-channel standardization with statistics of the loaded data (use
    :func:`apply_standardization` with training-split statistics).
    """
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    labels, pixels = [], []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD:
            raise FormatError(f"{path}: size {raw.size} is not a positive multiple of {CIFAR_RECORD}")
        rec = raw.reshape(-1, CIFAR_RECORD)
        if np.any(rec[:, 0] >= num_classes):
            raise FormatError(f"{path}: label byte >= num_classes ({num_classes})")
        labels.append(rec[:, 0].astype(np.int64))
        pixels.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    y = np.concatenate(labels)
    X = np.concatenate(pixels).astype(np.float64) / 255.0
    ds = LabeledDataset(X, y, y, num_classes)
    if standardize:
        ds = apply_standardization(ds, *channel_stats(ds))
    return ds


def channel_stats(ds: LabeledDataset) -> tuple:
    """Per-channel mean and std (feature-wise for flat inputs)."""
    X = ds.features
    axes = (0, 2, 3) if X.ndim == 4 else (0,)
    return X.mean(axis=axes), X.std(axis=axes)


def apply_standardization(ds: LabeledDataset, mean, std) -> LabeledDataset:
    X = ds.features
    shape = (1, -1, 1, 1) if X.ndim == 4 else (1, -1)
    safe = np.where(np.asarray(std) > 0, std, 1.0)
    feats = (X - np.reshape(mean, shape)) / np.reshape(safe, shape)
    return replace(ds, features=feats)


def pair_flip_map(num_classes: int) -> dict:
    """Default asymmetric map ``k -> k + 1 (mod c)``."""
    return {k: (k + 1) % num_classes for k in range(num_classes)}


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = SYMMETRIC
    rate: float = 0.0
    flip_map: Optional[dict] = None

    def __post_init__(self):
        if self.kind not in (SYMMETRIC, ASYMMETRIC):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("noise rate must lie in [0, 1]")
        if self.flip_map is not None and any(int(k) == int(v) for k, v in self.flip_map.items()):
            raise ValueError("asymmetric flip map must not map a class to itself")


def corrupt(ds: LabeledDataset, spec: NoiseSpec, seed=0) -> LabeledDataset:
    """Inject label noise into a clean dataset.

    Symmetric: each label is flipped with probability ``rate`` to one of
    the other ``c - 1`` classes uniformly. Asymmetric: flipped with
    probability ``rate`` to ``flip_map[label]``.
    """
    if np.any(ds.corrupted):
        raise ValueError("dataset is already corrupted")
    rng = np.random.default_rng(seed)
    y = ds.true_labels
    c = ds.num_classes
    flip = rng.random(len(y)) < spec.rate
    if spec.kind == SYMMETRIC:
        if c < 2 and spec.rate > 0:
            raise ValueError("symmetric noise needs at least two classes")
        shift = rng.integers(1, c, size=len(y)) if c > 1 else np.zeros(len(y), dtype=np.int64)
        noisy = np.where(flip, (y + shift) % c, y)
    else:
        fmap = pair_flip_map(c) if spec.flip_map is None else {int(k): int(v) for k, v in spec.flip_map.items()}
        missing = sorted(set(np.unique(y).tolist()) - set(fmap))
        if missing:
            raise ValueError(f"flip map has no target for classes {missing}")
        target = np.array([fmap.get(k, k) for k in range(c)])
        noisy = np.where(flip, target[y], y)
    return replace(ds, noisy_labels=noisy)


def split_indices(ds: LabeledDataset, val_fraction: float, seed=0) -> tuple:
    """Stratified (by true class) disjoint train/validation index sets."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    val_idx = []
    for k in range(ds.num_classes):
        members = np.flatnonzero(ds.true_labels == k)
        members = members[rng.permutation(len(members))]
        val_idx.append(members[:int(round(val_fraction * len(members)))])
    val_idx = np.sort(np.concatenate(val_idx))
    train_idx = np.setdiff1d(np.arange(len(ds)), val_idx)
    return train_idx, val_idx


def split(ds: LabeledDataset, val_fraction: float, seed=0) -> tuple:
    train_idx, val_idx = split_indices(ds, val_fraction, seed)
    return ds.subset(train_idx), ds.subset(val_idx)


class BatchSampler:
    """Minibatch index stream that is a pure function of ``(seed, counter)``.

    ``mode="replacement"`` draws i.i.d. uniform indices with replacement;
    ``mode="shuffle"`` walks through per-epoch permutations.
    """

    def __init__(self, batch_size: int, seed=0, mode: str = "replacement", counter: int = 0):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        if mode not in ("replacement", "shuffle"):
            raise ValueError(f"unknown sampling mode {mode!r}")
        self.batch_size = batch_size
        self.seed = seed
        self.mode = mode
        self.counter = counter

    def indices(self, n: int, counter: int) -> np.ndarray:
        if n < 1:
            raise ValueError("cannot sample from an empty dataset")
        if self.mode == "replacement":
            return np.random.default_rng([self.seed, counter]).integers(0, n, self.batch_size)
        start = counter * self.batch_size
        out = []
        while len(out) < self.batch_size:
            epoch, pos = divmod(start + len(out), n)
            perm = np.random.default_rng([self.seed, epoch]).permutation(n)
            out.extend(perm[pos:pos + self.batch_size - len(out)].tolist())
        return np.asarray(out, dtype=np.int64)

    def sample(self, n: int) -> np.ndarray:
        idx = self.indices(n, self.counter)
        self.counter += 1
        return idx


def sample_batch(sampler: BatchSampler, ds) -> np.ndarray:
    return sampler.sample(len(ds))


def class_counts(labels: Sequence[int], num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
