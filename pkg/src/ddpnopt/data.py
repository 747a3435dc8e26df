"""Datasets: synthetic Gaussian clusters, blob images and small CSV files.

All randomness goes through numpy's ``Generator(PCG64)``; normal variates use
``Generator.standard_normal`` (ziggurat).  Both are platform independent, so
seeded datasets and batch orders reproduce bit for bit.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError


def rng_for(*keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_names: tuple = ()
    normalization: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.labels, dtype=int)
        if x.ndim != 2 or x.shape[0] < 1:
            raise DataError("inputs must be a non-empty 2-D array")
        if y.shape != (x.shape[0],):
            raise DataError(f"{y.shape[0]} labels for {x.shape[0]} samples")
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise DataError("label outside [0, num_classes)")
        if not np.all(np.isfinite(x)):
            raise DataError("non-finite input value")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx):
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx])


def gaussian_clusters(k: int, dim: int = 30, n_per_cluster: int = 100, sigma: float = 1.0,
                      center_scale: float = 5.0, seed: int = 0) -> Dataset:
    """``k`` isotropic clusters with centers drawn uniformly on a sphere of radius ``center_scale``."""
    if k < 2:
        raise ValueError("need at least two clusters")
    rng = rng_for(seed)
    c = rng.standard_normal((k, dim))
    centers = center_scale * c / np.linalg.norm(c, axis=1, keepdims=True)
    noise = rng.standard_normal((k, n_per_cluster, dim))
    x = (centers[:, None, :] + sigma * noise).reshape(k * n_per_cluster, dim)
    y = np.repeat(np.arange(k), n_per_cluster)
    return Dataset(x, y, k, tuple(str(i) for i in range(k)))


def blob_images(n: int, size: int = 8, seed: int = 0, noise: float = 0.1) -> Dataset:
    """Binary task on ``size x size`` rasters: one Gaussian blob (label 0) vs two (label 1)."""
    rng = rng_for(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    imgs = np.empty((n, size * size))
    labels = np.arange(n) % 2
    for i in range(n):
        img = np.zeros((size, size))
        for _ in range(labels[i] + 1):
            cy, cx = rng.uniform(1, size - 2, size=2)
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 2.0)
        img += noise * rng.standard_normal((size, size))
        imgs[i] = img.reshape(-1)
    return Dataset(imgs, labels, 2, ("one", "two"))


def standardize(ds: Dataset) -> Dataset:
    """Per-feature standardisation; a no-op on data that is already normalised."""
    if ds.normalization is not None:
        return ds
    mean = ds.inputs.mean(axis=0)
    std = ds.inputs.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    x = (ds.inputs - mean) / scale
    return replace(ds, inputs=x, normalization={"mean": mean, "scale": scale})


def load_csv(path, label_column: str = "label", normalize: bool = False) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"missing label column {label_column!r}")
        li = header.index(label_column)
        feat_cols = [j for j in range(len(header)) if j != li]
        rows, raw_labels = [], []
        for r, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(rec)}", row=r)
            vals = []
            for j in feat_cols:
                try:
                    vals.append(float(rec[j]))
                except ValueError:
                    raise DataError(f"non-numeric cell {rec[j]!r}", row=r, column=header[j]) from None
            rows.append(vals)
            raw_labels.append(rec[li].strip())
    if not rows:
        raise DataError("no data rows")
    names = list(dict.fromkeys(raw_labels))
    index = {n: i for i, n in enumerate(names)}
    ds = Dataset(np.array(rows, dtype=float), np.array([index[v] for v in raw_labels]),
                 len(names), tuple(names))
    return standardize(ds) if normalize else ds


def write_csv(ds: Dataset, path, label_column: str = "label"):
    names = ds.class_names or tuple(str(i) for i in range(ds.num_classes))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(ds.dim)] + [label_column])
        for x, y in zip(ds.inputs, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [names[y]])


def batches(n: int, batch_size: int, seed: int, epoch: int):
    """Index slices of one epoch: a seeded permutation cut into contiguous pieces."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(n) if hasattr(n, "__len__") else int(n)
    perm = rng_for(seed, epoch).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def split(ds: Dataset, fraction: float, seed: int = 0):
    """Seeded split into ``(first, second)`` with ``fraction`` of samples in the first."""
    perm = rng_for(seed, 7919).permutation(len(ds))
    cut = int(round(fraction * len(ds)))
    return ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))
