"""Streaming cluster structure over mini-batches.

K-means seeds the clusters on the first batch. Each subsequent batch is
assigned to the previous centroids, the centroids are refreshed from the
batch means, and an average-linkage tree is rebuilt over the cluster-level
distance matrix. The tree's merge heights act as per-pair triplet margins.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from mrot.ground_cost import pairwise_euclidean


def _points(x):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or not np.all(np.isfinite(arr)):
        raise ValueError("points must be a finite (n, d) array")
    return arr


class Hierarchy:
    """Agglomerative merge tree over a set of cluster ids.

    Attributes
    ----------
    leaves : list of int
        Cluster ids present in the tree, in the order of the distance matrix.
    merges : list of (frozenset, frozenset, float)
        The two merged cluster-id sets and the merge height, in merge order.
    """

    def __init__(self, leaves, merges):
        self.leaves = list(leaves)
        self.merges = list(merges)
        self._pos = {c: i for i, c in enumerate(self.leaves)}
        n = len(self.leaves)
        self._thresholds = np.full((n, n), np.nan)
        for left, right, height in self.merges:
            for p in left:
                for q in right:
                    i, j = self._pos[p], self._pos[q]
                    self._thresholds[i, j] = self._thresholds[j, i] = height

    def __contains__(self, cluster):
        return cluster in self._pos

    @property
    def heights(self):
        return [h for _, _, h in self.merges]

    def merge_threshold(self, p, q) -> float:
        """Height at which clusters ``p`` and ``q`` first share a node."""
        if len(self.leaves) < 2:
            raise ValueError("hierarchy has a single leaf; merge thresholds are undefined")
        for c in (p, q):
            if c not in self._pos:
                raise KeyError(
                    f"cluster {c} is not a leaf of this hierarchy (present: {self.leaves}); "
                    "clusters that were empty in this batch are excluded"
                )
        if p == q:
            raise ValueError("merge threshold needs two distinct clusters")
        return float(self._thresholds[self._pos[p], self._pos[q]])

    def threshold_matrix(self):
        """Cophenetic matrix over ``leaves`` (NaN on the diagonal)."""
        return self._thresholds.copy()


def build_hierarchy(dc, leaves=None, weights=None) -> Hierarchy:
    """Average-linkage agglomeration on a cluster distance matrix.

    Parameters
    ----------
    dc : ndarray of shape (K, K)
        Symmetric inter-cluster distances; the diagonal is ignored.
    leaves : sequence of int, optional
        Cluster ids for the rows of ``dc``; defaults to ``range(K)``.
    weights : sequence of float, optional
        Leaf sizes used when averaging merged distances. Passing the sample
        counts makes every merged distance equal the mean pairwise sample
        distance between the two groups. Defaults to 1 per leaf (UPGMA).

    Ties between candidate pairs go to the lowest (row, column) position.
    """
    d = np.array(dc, dtype=float)
    k = d.shape[0]
    if d.ndim != 2 or d.shape[1] != k:
        raise ValueError(f"distance matrix must be square, got shape {d.shape}")
    off = ~np.eye(k, dtype=bool)
    if np.any(d[off] < 0) or not np.allclose(d, d.T, rtol=1e-12, atol=1e-12):
        raise ValueError("distance matrix must be symmetric with non-negative off-diagonal")
    leaves = list(range(k)) if leaves is None else list(leaves)
    if len(leaves) != k:
        raise ValueError("leaves must match the distance matrix size")
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=float).copy()

    groups = {i: frozenset([leaves[i]]) for i in range(k)}
    active = list(range(k))
    merges = []
    d[~off] = np.inf
    while len(active) > 1:
        sub = d[np.ix_(active, active)]
        flat = int(np.argmin(sub))
        a, b = active[flat // len(active)], active[flat % len(active)]
        height = float(d[a, b])
        if merges and height < merges[-1][2]:
            # average linkage is monotone; only rounding can get here
            height = merges[-1][2]
        merges.append((groups[a], groups[b], height))
        # Lance-Williams update for weighted average linkage, stored in slot a
        for c in active:
            if c not in (a, b):
                d[a, c] = d[c, a] = (w[a] * d[a, c] + w[b] * d[b, c]) / (w[a] + w[b])
        w[a] += w[b]
        groups[a] = groups[a] | groups[b]
        active.remove(b)
    return Hierarchy(leaves, merges)


def assign(points, centroids, distance=None) -> np.ndarray:
    """Nearest-centroid assignment; ties go to the lowest cluster index.

    ``distance(points, centroids)`` may be supplied and must return an
    (n, K) matrix; Euclidean is used otherwise.
    """
    x = _points(points)
    m = _points(centroids)
    if m.shape[0] == 0:
        raise ValueError("need at least one centroid")
    if x.shape[1] != m.shape[1]:
        raise ValueError(f"point dimension {x.shape[1]} does not match centroid dimension {m.shape[1]}")
    dist = pairwise_euclidean(x, m) if distance is None else np.asarray(distance(x, m))
    return np.argmin(dist, axis=1)


def update_centroids(points, assignments, k, previous) -> np.ndarray:
    """Per-cluster means of this batch; empty clusters keep ``previous``."""
    x = _points(points)
    a = np.asarray(assignments, dtype=int)
    prev = _points(previous)
    if prev.shape != (k, x.shape[1]):
        raise ValueError(f"previous centroids must have shape {(k, x.shape[1])}, got {prev.shape}")
    if a.shape[0] != x.shape[0] or np.any(a < 0) or np.any(a >= k):
        raise ValueError("assignments must index clusters 0..k-1, one per point")
    out = prev.copy()
    for p in range(k):
        mask = a == p
        if mask.any():
            out[p] = x[mask].mean(axis=0)
    return out


def cluster_distance_matrix(pair_dist, assignments, k=None):
    """Average pairwise distance between members of every two non-empty clusters.

    Parameters
    ----------
    pair_dist : ndarray of shape (n, n)
        Ground distance between every two samples of the pooled batch.
    assignments : ndarray of shape (n,)

    Returns
    -------
    dc : ndarray of shape (K', K')
        Over the K' clusters that are non-empty in this batch. The diagonal
        is the within-cluster average, self-pairs included.
    present : list of int
        Cluster id of each row of ``dc``.
    counts : ndarray of shape (K',)
    """
    dist = np.asarray(pair_dist, dtype=float)
    a = np.asarray(assignments, dtype=int)
    if dist.shape != (a.shape[0], a.shape[0]):
        raise ValueError("pair_dist must be (n, n) for n assignments")
    k = int(a.max()) + 1 if k is None else k
    present = [p for p in range(k) if np.any(a == p)]
    onehot = np.stack([(a == p).astype(float) for p in present])
    counts = onehot.sum(axis=1)
    dc = (onehot @ dist @ onehot.T) / np.outer(counts, counts)
    return dc, present, counts


@dataclass
class ClusterState:
    centroids: np.ndarray
    assignments: np.ndarray
    hierarchy: Hierarchy | None = None
    counts: np.ndarray = field(default=None)

    @property
    def k(self):
        return self.centroids.shape[0]


def _farthest_point_seeds(x, k, rng):
    chosen = [int(rng.integers(x.shape[0]))]
    nearest = pairwise_euclidean(x, x[chosen])[:, 0]
    for _ in range(1, k):
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, pairwise_euclidean(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def within_cluster_cost(points, centroids, assignments) -> float:
    x = _points(points)
    m = _points(centroids)
    return float(np.linalg.norm(x - m[np.asarray(assignments)], axis=1).sum())


def structure_from_assignments(pair_dist, assignments, k):
    """Cluster distance matrix and hierarchy for one batch, with counts per cluster."""
    dc, present, counts = cluster_distance_matrix(pair_dist, assignments, k)
    hierarchy = build_hierarchy(dc, leaves=present, weights=counts)
    full_counts = np.bincount(np.asarray(assignments, dtype=int), minlength=k)
    return hierarchy, full_counts


def kmeans_init(points, k, seed=0, max_iter=100, pair_dist=None) -> ClusterState:
    """Lloyd's K-means from farthest-point seeds, plus the first hierarchy.

    ``pair_dist`` is the (n, n) ground distance used for the cluster
    distance matrix; the Euclidean distance of ``points`` is used if omitted.
    """
    x = _points(points)
    if not 1 <= k <= x.shape[0]:
        raise ValueError(f"k must be between 1 and the number of points ({x.shape[0]}), got {k}")
    rng = np.random.default_rng(seed)
    centroids = _farthest_point_seeds(x, k, rng)
    labels = assign(x, centroids)
    for _ in range(max_iter):
        centroids = update_centroids(x, labels, k, centroids)
        new = assign(x, centroids)
        if np.array_equal(new, labels):
            break
        labels = new
    centroids = update_centroids(x, labels, k, centroids)
    dist = pairwise_euclidean(x, x) if pair_dist is None else pair_dist
    hierarchy, counts = structure_from_assignments(dist, labels, k)
    return ClusterState(centroids, labels, hierarchy, counts)


def write_cluster_dump(path, batch_index, assignments, is_source, append=True):
    """Append ``batch_index, sample_index, cluster, is_source`` rows to a CSV."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(["batch_index", "sample_index", "cluster", "is_source"])
        for i, (c, s) in enumerate(zip(assignments, is_source)):
            writer.writerow([batch_index, i, int(c), int(bool(s))])
