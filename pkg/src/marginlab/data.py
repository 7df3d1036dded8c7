"""Dataset provisioning: seeded 2-d synthetic generators and CIFAR-10 subsets.

The 2-d generators are the primary experimental bed; their low dimension
makes brute-force margin oracles affordable.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, d) or (N, C, H, W), float64
    labels: np.ndarray  # (N,), int64
    num_classes: int
    name: str = "dataset"
    scale: np.ndarray = field(default=None)  # (d, 2) per-flattened-dim min/max

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.inputs):
            raise ValueError("inputs and labels disagree on sample count")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise ValueError("label out of range for num_classes")
        if self.scale is None:
            flat = self.inputs.reshape(len(self.inputs), -1) if len(self.inputs) else np.zeros((0, 1))
            if len(flat):
                self.scale = np.stack([flat.min(axis=0), flat.max(axis=0)], axis=1)
            else:
                self.scale = np.zeros((flat.shape[1], 2))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes,
                       name=self.name, scale=np.array(self.scale))

    def to_csv(self, path) -> None:
        """Flat export: header x0..xd, label."""
        flat = self.inputs.reshape(len(self), -1)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i}" for i in range(flat.shape[1])] + ["label"])
            for row, label in zip(flat, self.labels):
                writer.writerow([repr(v) for v in row] + [int(label)])


def gen_two_moons(n: int, noise: float, seed: int) -> Dataset:
    """Two interleaved half-circles with Gaussian coordinate noise.

    Balanced labels (counts differ by at most 1); with noise=0 the points
    lie exactly on the canonical arcs.
    """
    if n < 2:
        raise ValueError("gen_two_moons: need n >= 2")
    if noise < 0:
        raise ValueError("gen_two_moons: noise must be >= 0")
    n_outer = (n + 1) // 2
    n_inner = n // 2
    t_outer = np.linspace(0.0, np.pi, n_outer)
    t_inner = np.linspace(0.0, np.pi, n_inner)
    outer = np.stack([np.cos(t_outer), np.sin(t_outer)], axis=1)
    inner = np.stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)], axis=1)
    inputs = np.concatenate([outer, inner], axis=0)
    labels = np.concatenate([np.zeros(n_outer, dtype=np.int64), np.ones(n_inner, dtype=np.int64)])
    rng = np.random.default_rng(seed)
    if noise > 0:
        inputs = inputs + rng.normal(0.0, noise, size=inputs.shape)
    return Dataset(inputs, labels, num_classes=2, name="two-moons")


def gen_gaussian_blobs(k: int, n: int, centers, std: float, seed: int) -> Dataset:
    """k near-balanced isotropic Gaussian clusters at the given centers."""
    centers = np.asarray(centers, dtype=np.float64)
    if len(centers) != k:
        raise ValueError(f"gen_gaussian_blobs: got {len(centers)} centers for k={k}")
    if std < 0:
        raise ValueError("gen_gaussian_blobs: std must be >= 0")
    if std == 0 and len(np.unique(centers, axis=0)) < k:
        raise ValueError("gen_gaussian_blobs: duplicate centers with std=0 give degenerate labels")
    counts = np.full(k, n // k, dtype=np.int64)
    counts[: n % k] += 1
    rng = np.random.default_rng(seed)
    parts, labels = [], []
    for cls in range(k):
        pts = np.tile(centers[cls], (counts[cls], 1))
        if std > 0:
            pts = pts + rng.normal(0.0, std, size=pts.shape)
        parts.append(pts)
        labels.append(np.full(counts[cls], cls, dtype=np.int64))
    return Dataset(np.concatenate(parts), np.concatenate(labels), num_classes=k,
                   name="gaussian-blobs")


_CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 channel-major pixels
_CIFAR_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]


def load_cifar10_subset(path, n_per_class: int, classes, flatten: bool = False) -> Dataset:
    """First n_per_class records per requested class, in canonical file order.

    Records are 3073 bytes: label byte, then 1024 red, 1024 green, 1024 blue
    bytes (row-major 32x32). Pixels are scaled to [0, 1]; labels are remapped
    to 0..len(classes)-1 in sorted original-class order.
    """
    wanted = sorted(set(int(c) for c in classes))
    if not wanted:
        raise ValueError("load_cifar10_subset: classes must be non-empty")
    remap = {orig: i for i, orig in enumerate(wanted)}
    files = [os.path.join(path, f) for f in _CIFAR_FILES if os.path.exists(os.path.join(path, f))]
    if not files:
        raise FileNotFoundError(
            f"load_cifar10_subset: no CIFAR-10 binary batch files found in {path} "
            f"(expected one of {_CIFAR_FILES})"
        )
    remaining = {orig: n_per_class for orig in wanted}
    images, labels = [], []
    for fname in files:
        with open(fname, "rb") as fh:
            offset = 0
            while any(v > 0 for v in remaining.values()):
                record = fh.read(_CIFAR_RECORD)
                if not record:
                    break
                if len(record) != _CIFAR_RECORD:
                    raise ValueError(
                        f"{fname}: truncated record at byte offset {offset} "
                        f"({len(record)} of {_CIFAR_RECORD} bytes)"
                    )
                label = record[0]
                if label in remaining and remaining[label] > 0:
                    pixels = np.frombuffer(record, dtype=np.uint8, offset=1)
                    images.append(pixels.reshape(3, 32, 32).astype(np.float64) / 255.0)
                    labels.append(remap[label])
                    remaining[label] -= 1
                offset += _CIFAR_RECORD
        if not any(v > 0 for v in remaining.values()):
            break
    short = {k: v for k, v in remaining.items() if v > 0}
    if short:
        raise ValueError(f"load_cifar10_subset: ran out of records for classes {short}")
    inputs = np.stack(images)
    if flatten:
        inputs = inputs.reshape(len(inputs), -1)
    return Dataset(inputs, np.array(labels, dtype=np.int64), num_classes=len(wanted),
                   name="cifar10-subset")


def split(dataset: Dataset, fractions, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle then contiguous train/val/test cuts."""
    fracs = [float(f) for f in fractions]
    if len(fracs) != 3:
        raise ValueError("split: fractions must be (train, val, test)")
    if any(f <= 0 for f in fracs):
        raise ValueError(f"split: all fractions must be positive, got {fracs}")
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError(f"split: fractions must sum to 1, got sum {sum(fracs)}")
    n = len(dataset)
    c1 = int(round(fracs[0] * n))
    c2 = int(round((fracs[0] + fracs[1]) * n))
    sizes = (c1, c2 - c1, n - c2)
    if any(s <= 0 for s in sizes):
        raise ValueError(f"split: a split received 0 samples (sizes {sizes} from n={n})")
    perm = np.random.default_rng(seed).permutation(n)
    return (dataset.subset(perm[:c1]),
            dataset.subset(perm[c1:c2]),
            dataset.subset(perm[c2:]))
