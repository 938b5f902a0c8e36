"""Seeded synthetic datasets and a minimal CSV loader."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def two_moons(n=1000, noise=0.2, seed=0):
    rng = np.random.Generator(np.random.Philox(seed))
    n_top = n // 2
    t_top = rng.uniform(0, np.pi, n_top)
    t_bot = rng.uniform(0, np.pi, n - n_top)
    top = np.stack([np.cos(t_top), np.sin(t_top)], axis=1)
    bot = np.stack([1 - np.cos(t_bot), 0.5 - np.sin(t_bot)], axis=1)
    x = np.concatenate([top, bot]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n_top, dtype=np.int64), np.ones(n - n_top, dtype=np.int64)])
    perm = rng.permutation(n)
    return x[perm], y[perm]


def gaussian_blobs(n=1000, noise=1.0, seed=0, centers=((-1.5, -1.0), (1.5, 1.0))):
    rng = np.random.Generator(np.random.Philox(seed))
    centers = np.asarray(centers, dtype=np.float64)
    y = rng.integers(0, len(centers), n)
    x = centers[y] + noise * rng.standard_normal((n, centers.shape[1]))
    return x, y.astype(np.int64)


def stripes(n=200, noise=0.5, seed=0, size=8):
    """Single-channel images of horizontal (label 0) or vertical (label 1) stripes."""
    rng = np.random.Generator(np.random.Philox(seed))
    y = rng.integers(0, 2, n).astype(np.int64)
    phase = rng.integers(0, 2, n)
    idx = np.arange(size)
    x = np.empty((n, 1, size, size))
    for i in range(n):
        band = np.where((idx + phase[i]) % 2 == 0, 1.0, -1.0)
        x[i, 0] = band[:, None] if y[i] == 0 else band[None, :]
    x += noise * rng.standard_normal(x.shape)
    return x, y


def load_csv(path):
    """Rows of numeric features followed by an integer label in the last column.

    A header row is skipped when its last field is not an integer.
    """
    feats, labels = [], []
    with Path(path).open(newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                label = int(row[-1])
            except ValueError:
                if i == 0:
                    continue
                raise ValueError(f"{path}:{i + 1}: label {row[-1]!r} is not an integer") from None
            feats.append([float(v) for v in row[:-1]])
            labels.append(label)
    if not feats:
        raise ValueError(f"{path}: no data rows")
    return np.asarray(feats, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def train_test_split(x, y, test_fraction=0.3, seed=0):
    rng = np.random.Generator(np.random.Philox(seed + 7))
    perm = rng.permutation(len(y))
    n_test = int(round(test_fraction * len(y)))
    test, train = perm[:n_test], perm[n_test:]
    return x[train], y[train], x[test], y[test]
