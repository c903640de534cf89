"""Synthetic patch-image datasets with per-device class subsets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    x: np.ndarray  # (N, num_patches, patch_dim)
    y: np.ndarray  # (N,) int labels

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx])

    def split(self, fraction: float, rng: np.random.Generator) -> tuple["Dataset", "Dataset"]:
        """Random split; the first part holds ``round(fraction * N)`` samples."""
        order = rng.permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.take(order[:cut]), self.take(order[cut:])

    def batches(self, size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for s in range(0, len(self), size):
            sel = order[s:s + size]
            yield self.x[sel], self.y[sel]

    def sample_batch(self, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        sel = rng.choice(len(self), size=min(size, len(self)), replace=False)
        return self.x[sel], self.y[sel]

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))


class SyntheticTask:
    """Class-conditional Gaussian patch images.

    Every class owns a prototype of shape (num_patches, patch_dim); a sample is
    ``signal * prototype + noise * N(0, 1)``.
    """

    def __init__(self, num_classes: int, num_patches: int, patch_dim: int, signal: float = 1.0,
                 noise: float = 1.0, seed: int = 0):
        self.num_classes = num_classes
        self.num_patches = num_patches
        self.patch_dim = patch_dim
        self.signal = signal
        self.noise = noise
        proto_rng = np.random.default_rng([seed, 0x5EED])
        self.prototypes = proto_rng.standard_normal((num_classes, num_patches, patch_dim))

    def sample(self, n: int, rng: np.random.Generator, classes=None) -> Dataset:
        pool = np.arange(self.num_classes) if classes is None else np.asarray(classes, np.int64)
        y = pool[rng.integers(0, len(pool), size=n)]
        eps = rng.standard_normal((n, self.num_patches, self.patch_dim))
        x = self.signal * self.prototypes[y] + self.noise * eps
        return Dataset(x, y)


def class_subsets(num_devices: int, num_classes: int, per_device: int,
                  rng: np.random.Generator) -> list[list[int]]:
    """Non-IID class assignment: each device draws ``per_device`` distinct classes."""
    per_device = min(per_device, num_classes)
    return [sorted(rng.choice(num_classes, size=per_device, replace=False).tolist())
            for _ in range(num_devices)]


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(N, H, W, C) images to (N, (H/patch)*(W/patch), patch*patch*C) patch rows."""
    n, hgt, wid, c = images.shape
    if hgt % patch or wid % patch:
        raise ValueError("image size must be divisible by the patch size")
    x = images.reshape(n, hgt // patch, patch, wid // patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, (hgt // patch) * (wid // patch), patch * patch * c).astype(np.float64)


def load_npz(path: str | Path, patch: int) -> Dataset:
    """Loader hook for an external image set stored as ``images`` / ``labels`` arrays."""
    with np.load(path) as f:
        images = np.asarray(f["images"], dtype=np.float64)
        labels = np.asarray(f["labels"], dtype=np.int64)
    if images.ndim == 3:
        images = images[..., None]
    return Dataset(patchify(images, patch), labels)
