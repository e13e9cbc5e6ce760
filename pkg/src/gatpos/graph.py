"""Graph storage, dataset packages, splits and the negative-sampling table.

Graphs are undirected and unweighted. They are stored as compressed
neighbor lists (``neighbor_offsets`` / ``neighbor_targets``), with every
undirected edge present as two directed arcs.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .exceptions import DatasetFormatError, GraphRangeError, SplitError

logger = logging.getLogger(__name__)

EDGES_FILE = "edges.tsv"
FEATURES_FILE = "features.tsv"
LABELS_FILE = "labels.tsv"
META_FILE = "meta.json"
# feature matrices below this fraction of nonzeros are multiplied in CSR form
SPARSE_DENSITY = 0.25


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Symmetric adjacency in CSR neighbor-list form.

    ``neighbor_targets[neighbor_offsets[v]:neighbor_offsets[v + 1]]`` holds the
    sorted neighbors of ``v``. Self-loops are never stored.
    """

    num_nodes: int
    neighbor_offsets: np.ndarray
    neighbor_targets: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "neighbor_offsets", _frozen(self.neighbor_offsets, np.int64))
        object.__setattr__(self, "neighbor_targets", _frozen(self.neighbor_targets, np.int64))
        if self.neighbor_offsets.shape != (self.num_nodes + 1,):
            raise ValueError("neighbor_offsets must have length num_nodes + 1")
        if self.neighbor_offsets[-1] != len(self.neighbor_targets):
            raise ValueError("last offset must equal the number of arcs")

    def neighbors(self, v: int) -> np.ndarray:
        return self.neighbor_targets[self.neighbor_offsets[v]:self.neighbor_offsets[v + 1]]

    @cached_property
    def degrees(self) -> np.ndarray:
        return _frozen(np.diff(self.neighbor_offsets), np.int64)

    @property
    def num_arcs(self) -> int:
        """Number of directed arcs (twice the number of undirected edges)."""
        return int(len(self.neighbor_targets))

    @cached_property
    def arc_sources(self) -> np.ndarray:
        """Center node ``v`` of every stored arc ``(v, u)``, in storage order."""
        return _frozen(np.repeat(np.arange(self.num_nodes), self.degrees), np.int64)

    @cached_property
    def attention_segments(self):
        """Arcs of ``N(v) ∪ {v}`` for every node, grouped by ``v``.

        Returns ``(offsets, centers, members)``: segment ``v`` spans
        ``offsets[v]:offsets[v + 1]``; ``centers`` repeats ``v`` and ``members``
        lists ``u`` in increasing order (the self-arc sits at its sorted slot).
        """
        centers = np.concatenate([self.arc_sources, np.arange(self.num_nodes)])
        members = np.concatenate([self.neighbor_targets, np.arange(self.num_nodes)])
        order = np.lexsort((members, centers))
        centers, members = centers[order], members[order]
        offsets = np.concatenate([[0], np.cumsum(self.degrees + 1)])
        return _frozen(offsets, np.int64), _frozen(centers, np.int64), _frozen(members, np.int64)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.arc_sources.tolist(), self.neighbor_targets.tolist()))

    def permute(self, perm) -> "Graph":
        """Relabel nodes so that old node ``v`` becomes ``perm[v]``."""
        perm = np.asarray(perm)
        pairs = np.stack([perm[self.arc_sources], perm[self.neighbor_targets]], axis=1)
        return symmetrize(pairs, self.num_nodes)


def symmetrize(edge_pairs, num_nodes: int) -> Graph:
    """Build an undirected :class:`Graph` from arbitrary (u, v) pairs.

    Both directions are stored once; duplicates and self-loops are dropped.
    """
    pairs = np.asarray(edge_pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) and (pairs.min() < 0 or pairs.max() >= num_nodes):
        bad = pairs[((pairs < 0) | (pairs >= num_nodes)).any(axis=1)][0]
        raise GraphRangeError(f"edge {tuple(bad.tolist())} has an endpoint outside [0, {num_nodes})")
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    both = np.concatenate([pairs, pairs[:, ::-1]])
    if len(both):
        both = np.unique(both, axis=0)  # lexicographic: sorted by source, then target
    counts = np.bincount(both[:, 0], minlength=num_nodes) if len(both) else np.zeros(num_nodes, np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return Graph(num_nodes, offsets, both[:, 1] if len(both) else np.zeros(0, np.int64))


@dataclass(frozen=True, eq=False)
class Dataset:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    raw_edge_count: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        if self.features.ndim != 2 or self.features.shape[0] != self.graph.num_nodes:
            raise DatasetFormatError(
                f"feature matrix has {self.features.shape[0]} rows, graph has {self.graph.num_nodes} nodes"
            )
        if self.labels.shape != (self.graph.num_nodes,):
            raise DatasetFormatError("labels must have one entry per node")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError(f"labels must lie in [0, {self.num_classes})")

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @cached_property
    def feature_operand(self):
        """Features in the cheaper form for ``X @ W``: CSR when mostly zeros."""
        density = np.count_nonzero(self.features) / max(self.features.size, 1)
        if density < SPARSE_DENSITY:
            return sp.csr_matrix(self.features)
        return self.features


def _line_numbers(path: Path) -> list[int]:
    with open(path) as fh:
        return [i for i, line in enumerate(fh, start=1) if line.strip()]


def _parse_matrix(path: Path, scalar, dtype, width=None, allow_empty=False) -> np.ndarray:
    """Parse a whitespace-separated numeric table, reporting the offending line on error."""
    if not path.is_file():
        raise DatasetFormatError(f"missing dataset file: {path.name} (looked in {path.parent})")
    with open(path) as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        if allow_empty:
            return np.zeros((0, width or 0), dtype=dtype)
        raise DatasetFormatError(f"{path.name} is empty")
    counts = np.fromiter((len(line.split()) for line in lines), dtype=np.int64, count=len(lines))
    expected = width if width is not None else counts[0]
    bad = np.flatnonzero(counts != expected)
    if len(bad):
        lineno = _line_numbers(path)[bad[0]]
        raise DatasetFormatError(f"{path.name}:{lineno}: expected {expected} values, found {counts[bad[0]]}")
    tokens = " ".join(lines).split()
    try:
        values = np.array(tokens, dtype=dtype)
    except ValueError:
        for i, line in enumerate(lines):
            try:
                [scalar(tok) for tok in line.split()]
            except ValueError as exc:
                lineno = _line_numbers(path)[i]
                raise DatasetFormatError(f"{path.name}:{lineno}: {exc}") from None
        raise
    return values.reshape(len(lines), expected)


def load_dataset(dir_path, name: str | None = None) -> Dataset:
    """Read a dataset package directory (edges/features/labels TSV files)."""
    root = Path(dir_path)
    explicit = name
    name = name or root.name

    features = _parse_matrix(root / FEATURES_FILE, float, np.float64)
    num_nodes = features.shape[0]

    labels = _parse_matrix(root / LABELS_FILE, int, np.int64, width=1)[:, 0] if num_nodes else np.zeros(0, np.int64)
    if len(labels) != num_nodes:
        raise DatasetFormatError(f"{LABELS_FILE} has {len(labels)} lines, {FEATURES_FILE} has {num_nodes}")

    pairs = _parse_matrix(root / EDGES_FILE, int, np.int64, width=2, allow_empty=True)
    bad = np.flatnonzero(((pairs < 0) | (pairs >= num_nodes)).any(axis=1))
    if len(bad):
        lineno = _line_numbers(root / EDGES_FILE)[bad[0]]
        raise DatasetFormatError(f"{EDGES_FILE}:{lineno}: node id out of range [0, {num_nodes})")

    num_classes = int(labels.max()) + 1 if num_nodes else 0
    meta_path = root / META_FILE
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text())
        checks = {"num_nodes": num_nodes, "num_features": features.shape[1]}
        for key, actual in checks.items():
            if key in meta and int(meta[key]) != actual:
                raise DatasetFormatError(f"{META_FILE}: {key}={meta[key]} but files give {actual}")
        if "num_classes" in meta:
            if int(meta["num_classes"]) < num_classes:
                raise DatasetFormatError(f"{META_FILE}: num_classes={meta['num_classes']} below max label + 1")
            num_classes = int(meta["num_classes"])
        name = explicit or meta.get("name", name)

    graph = symmetrize(pairs, num_nodes)
    return Dataset(graph, features, labels, num_classes, name=name, raw_edge_count=len(pairs))


def save_dataset(dataset: Dataset, dir_path) -> Path:
    """Write ``dataset`` as a package directory readable by :func:`load_dataset`."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    g = dataset.graph
    keep = g.arc_sources < g.neighbor_targets
    with open(root / EDGES_FILE, "w") as fh:
        for u, v in zip(g.arc_sources[keep], g.neighbor_targets[keep]):
            fh.write(f"{u}\t{v}\n")
    with open(root / FEATURES_FILE, "w") as fh:
        for row in dataset.features:
            fh.write("\t".join(repr(float(x)) for x in row) + "\n")
    with open(root / LABELS_FILE, "w") as fh:
        fh.writelines(f"{int(y)}\n" for y in dataset.labels)
    meta = {
        "name": dataset.name,
        "num_nodes": dataset.num_nodes,
        "num_features": dataset.num_features,
        "num_classes": dataset.num_classes,
    }
    (root / META_FILE).write_text(json.dumps(meta, indent=2) + "\n")
    return root


def homophily_beta(dataset: Dataset) -> float:
    """Mean fraction of same-label neighbors, over nodes with at least one neighbor."""
    g = dataset.graph
    deg = g.degrees
    if not deg.any():
        warnings.warn("graph has no edges; homophily is reported as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    same = dataset.labels[g.arc_sources] == dataset.labels[g.neighbor_targets]
    same_counts = np.bincount(g.arc_sources, weights=same, minlength=g.num_nodes)
    mask = deg > 0
    return float(np.mean(same_counts[mask] / deg[mask]))


@dataclass(frozen=True, eq=False)
class SplitAssignment:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        for part in ("train_idx", "val_idx", "test_idx"):
            object.__setattr__(self, part, _frozen(getattr(self, part), np.int64))
        seen = np.concatenate([self.train_idx, self.val_idx, self.test_idx])
        if len(np.unique(seen)) != len(seen):
            raise SplitError("train/val/test index lists overlap or contain duplicates")

    def validate(self, num_nodes: int) -> "SplitAssignment":
        for part in (self.train_idx, self.val_idx, self.test_idx):
            if len(part) and (part.min() < 0 or part.max() >= num_nodes):
                raise GraphRangeError(f"split index out of range [0, {num_nodes})")
        return self

    def to_json(self) -> dict:
        return {"train": self.train_idx.tolist(), "val": self.val_idx.tolist(), "test": self.test_idx.tolist()}


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def generate_splits(dataset: Dataset, seed: int, fractions=(0.6, 0.2, 0.2)) -> SplitAssignment:
    """Random per-class 60/20/20 partition, reproducible for a given seed."""
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) == 0:
            continue
        if len(members) < 5:
            raise SplitError(f"class {c} has only {len(members)} members; at least 5 are needed")
        members = rng.permutation(members)
        n_train = _round_half_up(fractions[0] * len(members))
        n_val = _round_half_up(fractions[1] * len(members))
        train.append(members[:n_train])
        val.append(members[n_train:n_train + n_val])
        test.append(members[n_train + n_val:])
    return SplitAssignment(np.sort(np.concatenate(train)), np.sort(np.concatenate(val)), np.sort(np.concatenate(test)))


def load_splits(path, num_nodes: int | None = None) -> SplitAssignment:
    """Read a ``{"train": [...], "val": [...], "test": [...]}`` split file."""
    doc = json.loads(Path(path).read_text())
    try:
        parts = [np.asarray(doc[key], dtype=np.int64) for key in ("train", "val", "test")]
    except KeyError as exc:
        raise SplitError(f"split file {path} lacks key {exc}") from None
    split = SplitAssignment(*parts)
    if num_nodes is not None:
        split.validate(num_nodes)
    return split


def save_splits(split: SplitAssignment, path) -> None:
    Path(path).write_text(json.dumps(split.to_json()) + "\n")


@dataclass(frozen=True, eq=False)
class NegativeDistribution:
    """Global unigram table ``weight(v) = degree(v) ** exponent``.

    Sampling inverts the cumulative table with a binary search.
    """

    weights: np.ndarray
    exponent: float = 0.75
    cumulative: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = _frozen(self.weights, np.float64)
        if (w < 0).any():
            raise ValueError("negative sampling weights must be nonnegative")
        if not w.sum() > 0:
            raise ValueError("negative sampling weights are all zero")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "cumulative", _frozen(np.cumsum(w), np.float64))

    @property
    def total(self) -> float:
        return float(self.cumulative[-1])

    @property
    def probabilities(self) -> np.ndarray:
        return self.weights / self.total


def build_negative_distribution(graph: Graph, exponent: float = 0.75) -> NegativeDistribution:
    if exponent < 0:
        raise ValueError("exponent must be nonnegative")
    deg = graph.degrees.astype(np.float64)
    weights = np.where(deg > 0, deg ** exponent, 0.0)
    return NegativeDistribution(weights, exponent)


def sample_negatives(dist: NegativeDistribution, count, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` i.i.d. node indices from ``dist`` (``count`` may be a shape)."""
    u = rng.random(count) * dist.total
    idx = np.searchsorted(dist.cumulative, u, side="right")
    # u can round up to the total; map it to the last node with nonzero weight
    return np.minimum(idx, np.flatnonzero(dist.weights)[-1])
