"""First-neighbor clustering (FINCH and its distance-constrained variant),
a k-means baseline, pair-counting metrics and pseudo-label assignment.

Distances are cosine distances ``1 - <u, v>`` between row-normalized vectors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .synth import LabeledDataset

__all__ = [
    "Partition",
    "ClusterMetrics",
    "normalize_rows",
    "cosine_distances",
    "first_neighbors",
    "merge_pass",
    "cfinch",
    "finch",
    "kmeans",
    "pairwise_fscore",
    "assign_pseudo_labels",
    "save_partition",
    "load_partition",
    "save_metrics",
]


@dataclass(frozen=True, eq=False)
class Partition:
    """Cluster id per sample; ids are contiguous and every cluster is non-empty."""

    assignment: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("assignment must be a non-empty 1-D array")
        if a.min() < 0 or not np.all(np.bincount(a) > 0):
            raise ValueError("cluster ids must be contiguous in [0, num_clusters) with no empty cluster")
        object.__setattr__(self, "assignment", a)

    @property
    def num_clusters(self) -> int:
        return int(self.assignment.max()) + 1

    def __len__(self) -> int:
        return self.assignment.size

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment)

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        """Compact arbitrary labels, numbering clusters by first appearance."""
        labels = np.asarray(labels)
        _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
        rank = np.empty(len(first), dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(len(first))
        return cls(rank[inverse.ravel()])

    def compose(self, upper: "Partition") -> "Partition":
        """Map each sample through this partition, then through ``upper``."""
        if len(upper) != self.num_clusters:
            raise ValueError("upper partition must cover exactly this partition's clusters")
        return Partition.from_labels(upper.assignment[self.assignment])


@dataclass(frozen=True)
class ClusterMetrics:
    pairwise_precision: float
    pairwise_recall: float
    f_score: float

    def as_record(self) -> dict:
        return {
            "pairwise_precision": self.pairwise_precision,
            "pairwise_recall": self.pairwise_recall,
            "f_score": self.f_score,
        }


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def cosine_distances(x: np.ndarray) -> np.ndarray:
    u = normalize_rows(x)
    d = 1.0 - u @ u.T
    # keep the matrix exactly symmetric so nn decisions cannot depend on order
    return np.triu(d, 1) + np.triu(d, 1).T


def _neighbors(x: np.ndarray):
    d = cosine_distances(x)
    np.fill_diagonal(d, np.inf)
    nn = np.argmin(d, axis=1)
    return nn, d[np.arange(len(nn)), nn]


def first_neighbors(centroids: np.ndarray) -> np.ndarray:
    """Index of each row's nearest other row; ties go to the lowest index."""
    centroids = np.atleast_2d(centroids)
    if centroids.shape[0] < 2:
        raise ValueError("first neighbors need at least two rows")
    return _neighbors(centroids)[0]


def _merge(centroids: np.ndarray, d: float):
    n = centroids.shape[0]
    if n == 1:
        return Partition(np.zeros(1, dtype=np.int64)), np.empty(0)
    nn, dist = _neighbors(centroids)
    # a shared-neighbor link i-j (nn[i] == nn[j] == k) needs both i-k and j-k
    # below d, and those two links alone already connect i and j
    keep = dist < d
    src = np.arange(n)[keep]
    graph = coo_matrix((np.ones(src.size), (src, nn[keep])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return Partition.from_labels(labels), dist[keep]


def merge_pass(centroids: np.ndarray, d: float = math.inf) -> Partition:
    """One first-neighbor linking pass restricted to neighbor distances ``< d``."""
    return _merge(np.atleast_2d(np.asarray(centroids, dtype=np.float64)), d)[0]


def _centroids(features: np.ndarray, part: Partition) -> np.ndarray:
    sums = np.zeros((part.num_clusters, features.shape[1]))
    np.add.at(sums, part.assignment, features)
    return normalize_rows(sums / part.sizes()[:, None])


def _levels(features: np.ndarray, d: float, merges: list | None):
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    level, link_d = _merge(features, d)
    if merges is not None:
        merges.extend(link_d.tolist())
    levels = [level]
    while level.num_clusters > 1:
        upper, link_d = _merge(_centroids(features, level), d)
        if upper.num_clusters >= level.num_clusters:
            break
        if merges is not None:
            merges.extend(link_d.tolist())
        level = level.compose(upper)
        levels.append(level)
    return levels


def cfinch(features: np.ndarray, d: float, merges: list | None = None) -> Partition:
    """Recursive first-neighbor merging, honoring only links shorter than ``d``.

    Runs to the constrained fixpoint and returns the final flat partition.
    If ``merges`` is a list, the justifying distance of every accepted link
    is appended to it.
    """
    if not d > 0:
        raise ValueError(f"d must be > 0, got {d}")
    return _levels(features, d, merges)[-1]


def finch(features: np.ndarray) -> list[Partition]:
    """Unconstrained first-neighbor hierarchy; one partition per level."""
    return _levels(features, math.inf, None)


def kmeans(features: np.ndarray, k: int, max_iters: int = 100, seed: int = 0, history: list | None = None) -> Partition:
    """Lloyd's algorithm from a seeded farthest-point initialization.

    Empty clusters keep their previous center and are dropped from the result.
    ``history`` (if given) receives the within-cluster SSE after every
    assignment step.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    closest = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(closest))
        chosen.append(nxt)
        closest = np.minimum(closest, np.sum((x - x[nxt]) ** 2, axis=1))
    centers = x[chosen].copy()

    assign = None
    for _ in range(max(1, max_iters)):
        sq = np.sum(x**2, 1)[:, None] - 2.0 * x @ centers.T + np.sum(centers**2, 1)[None, :]
        new = np.argmin(sq, axis=1)
        if history is not None:
            history.append(float(np.sum((x - centers[new]) ** 2)))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
    return Partition.from_labels(assign)


def _pairs(counts: np.ndarray) -> int:
    counts = np.asarray(counts, dtype=np.int64)
    return int(np.sum(counts * (counts - 1) // 2))


def pairwise_fscore(pred: Partition, truth: Partition) -> ClusterMetrics:
    """Pair-counting precision, recall and F-score of ``pred`` against ``truth``."""
    if len(pred) != len(truth):
        raise ValueError(f"partition lengths differ: {len(pred)} vs {len(truth)}")
    joint = pred.assignment * truth.num_clusters + truth.assignment
    tp = _pairs(np.unique(joint, return_counts=True)[1])
    pred_pairs = _pairs(pred.sizes())
    truth_pairs = _pairs(truth.sizes())
    if pred_pairs == 0 and truth_pairs == 0:
        return ClusterMetrics(1.0, 1.0, 1.0)
    p = tp / pred_pairs if pred_pairs else 0.0
    r = tp / truth_pairs if truth_pairs else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return ClusterMetrics(p, r, f)


def assign_pseudo_labels(features: np.ndarray, partition: Partition, domain: str = "target") -> LabeledDataset:
    """Label every sample with its cluster id."""
    features = np.atleast_2d(features)
    if features.shape[0] != len(partition):
        raise ValueError(f"{features.shape[0]} samples but partition covers {len(partition)}")
    return LabeledDataset(features, partition.assignment, domain, partition.num_clusters)


def save_partition(path, partition: Partition) -> None:
    Path(path).write_text("".join(f"{c}\n" for c in partition.assignment.tolist()))


def load_partition(path) -> Partition:
    return Partition(np.array([int(line) for line in Path(path).read_text().split()], dtype=np.int64))


def save_metrics(path, metrics: ClusterMetrics, **extra) -> None:
    Path(path).write_text(json.dumps({**metrics.as_record(), **extra}, sort_keys=True) + "\n")
