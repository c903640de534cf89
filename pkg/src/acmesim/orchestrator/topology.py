"""Cloud / edge / device hierarchy and the capability-based device partition."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from acmesim.energy import DeviceProfile

CLOUD = "cloud"


@dataclass(frozen=True)
class Topology:
    cloud: str
    edges: tuple[str, ...]
    clusters: dict  # edge id -> tuple of device ids

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "clusters", {e: tuple(self.clusters[e]) for e in self.edges})
        self.validate()

    def validate(self, devices: Sequence[str] | None = None) -> None:
        if not self.edges:
            raise ValueError("a topology needs at least one edge")
        if set(self.clusters) != set(self.edges):
            raise ValueError("clusters must be keyed by edge id")
        seen: dict[str, str] = {}
        for e in self.edges:
            if not self.clusters[e]:
                raise ValueError(f"cluster {e} is empty")
            for d in self.clusters[e]:
                if d in seen:
                    raise ValueError(f"device {d} is in both {seen[d]} and {e}")
                seen[d] = e
        if devices is not None and set(devices) != set(seen):
            raise ValueError("partition does not cover the device set")

    @property
    def devices(self) -> list[str]:
        return [d for e in self.edges for d in self.clusters[e]]

    def edge_of(self, device_id: str) -> str:
        for e in self.edges:
            if device_id in self.clusters[e]:
                return e
        raise KeyError(device_id)

    def to_dict(self) -> dict:
        return {"cloud": self.cloud, "edges": list(self.edges),
                "clusters": {e: list(self.clusters[e]) for e in self.edges}}


def _features(profiles: Sequence[DeviceProfile]) -> np.ndarray:
    X = np.array([[p.vcpus, p.C] for p in profiles], dtype=np.float64)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - X.mean(axis=0)) / sd


def _kmeans_pp_init(X: np.ndarray, S: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[int(rng.integers(len(X)))]]
    for _ in range(1, S):
        d2 = np.min([((X - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(X)))
        else:
            idx = int(rng.choice(len(X), p=d2 / total))
        centers.append(X[idx])
    return np.array(centers)


def _repair(X: np.ndarray, labels: np.ndarray, centers: np.ndarray, S: int) -> np.ndarray:
    """Give every empty cluster the nearest device from a cluster that can spare one."""
    labels = labels.copy()
    for s in range(S):
        if np.any(labels == s):
            continue
        counts = np.bincount(labels, minlength=S)
        donors = np.flatnonzero(counts[labels] > 1)
        d = ((X[donors] - centers[s]) ** 2).sum(axis=1)
        labels[donors[int(np.argmin(d))]] = s
    return labels


def kmeans(X: np.ndarray, S: int, rng: np.random.Generator, iters: int = 100) -> np.ndarray:
    """Lloyd's algorithm from a k-means++ start; returns labels with no empty cluster."""
    n = len(X)
    if S > n:
        raise ValueError(f"cannot form {S} clusters from {n} devices")
    if np.allclose(X, X[0]):
        # no geometry to exploit; any balanced split is as good as another
        return np.arange(n) % S
    centers = _kmeans_pp_init(X, S, rng)
    labels = np.full(n, -1)
    for _ in range(iters):
        d = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new = _repair(X, d.argmin(axis=1), centers, S)
        if np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([X[labels == s].mean(axis=0) for s in range(S)])
    return labels


def partition_devices(profiles: Sequence[DeviceProfile], S: int, seed: int = 0,
                      cloud: str = CLOUD) -> Topology:
    """Group devices by standardized (vCPUs, storage) into ``S`` nonempty clusters.

    Clusters are numbered by their first device in input order, so the
    result does not depend on how the clustering happened to label them.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    if S > len(profiles):
        raise ValueError(f"cannot form {S} clusters from {len(profiles)} devices")
    labels = kmeans(_features(profiles), S, np.random.default_rng([seed, 0xC1]))
    order = []
    for lab in labels:
        if lab not in order:
            order.append(int(lab))
    edges = tuple(f"edge{i}" for i in range(S))
    clusters = {edges[order.index(int(lab))]: [] for lab in order}
    for p, lab in zip(profiles, labels):
        clusters[edges[order.index(int(lab))]].append(p.device_id)
    return Topology(cloud, edges, clusters)
