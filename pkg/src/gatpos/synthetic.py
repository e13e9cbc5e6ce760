"""Small generated datasets for tests, demos and the bundled fixture."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .graph import Dataset, load_dataset, symmetrize


def two_cluster(num_nodes: int = 12, seed: int = 0, noise: float = 0.1) -> Dataset:
    """Two dense clusters joined by one bridge edge.

    Features are ``[cluster indicator, gaussian noise]`` and the label is
    the cluster, so the task is separable by construction.
    """
    rng = np.random.default_rng(seed)
    half = num_nodes // 2
    labels = np.array([0] * half + [1] * (num_nodes - half))
    pairs = []
    for block in (range(half), range(half, num_nodes)):
        block = list(block)
        for i, u in enumerate(block):
            for v in block[i + 1:]:
                if rng.random() < 0.6:
                    pairs.append((u, v))
            pairs.append((u, block[(i + 1) % len(block)]))  # ring keeps each cluster connected
    pairs.append((half - 1, half))
    features = np.stack([labels.astype(float), noise * rng.standard_normal(num_nodes)], axis=1)
    return Dataset(symmetrize(pairs, num_nodes), features, labels, 2, name="two-cluster")


def structural_roles(num_nodes: int = 120, seed: int = 0, feature_dim: int = 8, signal: float = 0.3) -> Dataset:
    """A heterophilic graph whose labels are structural roles.

    Hubs (class 0) connect only to leaves, and each leaf class attaches to
    hubs in a different way, so neighbors mostly disagree on labels. Node
    features carry a weak class signal plus noise.
    """
    rng = np.random.default_rng(seed)
    num_hubs = max(2, num_nodes // 10)
    labels = np.zeros(num_nodes, dtype=np.int64)
    labels[num_hubs:] = 1 + (np.arange(num_nodes - num_hubs) % 2)
    pairs = []
    hubs = np.arange(num_hubs)
    for v in range(num_hubs, num_nodes):
        if labels[v] == 1:
            pairs.append((v, int(rng.choice(hubs))))
        else:
            for h in rng.choice(hubs, size=2, replace=False):
                pairs.append((v, int(h)))
            partner = int(rng.integers(num_hubs, num_nodes))
            if labels[partner] == 1:
                pairs.append((v, partner))
    for i in range(num_hubs):
        pairs.append((i, (i + 1) % num_hubs))
    centers = rng.standard_normal((3, feature_dim))
    features = signal * centers[labels] + rng.standard_normal((num_nodes, feature_dim))
    return Dataset(symmetrize(pairs, num_nodes), features, labels, 3, name="structural-roles")


def fixture_path(name: str = "twelve") -> Path:
    """Directory of a dataset package shipped with the library."""
    return Path(str(resources.files("gatpos") / "fixtures" / name))


def load_fixture(name: str = "twelve") -> Dataset:
    return load_dataset(fixture_path(name))
