"""Temporal-similarity node clustering and per-cluster subgraphs.

Nodes are compared with dynamic time warping, clustered with K-means on
their rows of the DTW distance matrix, and the physical adjacency is
restricted to each cluster.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .dataio import AdjacencyMatrix, TrafficSeries


def _as_window(window):
    return -1 if window is None else int(window)


def dtw_distance(a, b, window=None, backend=None):
    """Unconstrained (or banded) DTW with absolute-difference local cost."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("DTW needs non-empty sequences")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("DTW needs finite values")
    w = _as_window(window)
    if w >= 0 and w < abs(a.size - b.size):
        raise ValueError(
            f"band width {w} admits no warping path for lengths {a.size} and {b.size}")
    return _kernels.dtw_pair(a, b, w, backend=backend)


@dataclass(frozen=True)
class DtwMatrix:
    dist: np.ndarray

    def to_csv(self, path):
        write_matrix_csv(path, self.dist)


def dtw_matrix(series, window=None, backend=None, threads=None):
    """Pairwise DTW between node columns, upper triangle mirrored."""
    x = series.values if isinstance(series, TrafficSeries) else np.asarray(series, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("series must be T x N with T >= 1")
    w = _as_window(window)
    if w < -1:
        raise ValueError("band width must be non-negative")
    upper = _kernels.dtw_upper(x, w, backend=backend, threads=threads)
    return DtwMatrix(upper + upper.T)


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    K: int
    seed: int
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)

    def members(self, k):
        return np.flatnonzero(self.labels == k)

    def sizes(self):
        return np.bincount(self.labels, minlength=self.K)

    def to_json(self):
        return {"K": int(self.K), "seed": int(self.seed),
                "labels": [int(v) for v in self.labels], "inertia": float(self.inertia)}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_labels(cls, labels, K=None, seed=0, inertia=0.0):
        labels = np.asarray(labels, dtype=int)
        K = int(labels.max()) + 1 if K is None else K
        return cls(labels, np.zeros((K, 0)), inertia, K, seed)


def _sqdist(x, centers):
    # ||x||^2 - 2 x.c + ||c||^2 loses exactness for duplicate points; use the direct form
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kpp_init(x, K, rng):
    n = x.shape[0]
    centers = np.empty((K, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    closest = _sqdist(x, centers[:1])[:, 0]
    for k in range(1, K):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[k] = x[idx]
        closest = np.minimum(closest, _sqdist(x, centers[k:k + 1])[:, 0])
    return centers


def _repair_empty(x, centers, labels, K):
    """Give every empty cluster the worst-fit point of a multi-member cluster."""
    labels = labels.copy()
    centers = centers.copy()
    while True:
        counts = np.bincount(labels, minlength=K)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return centers, labels
        d = np.einsum("nd,nd->n", x - centers[labels], x - centers[labels])
        movable = counts[labels] > 1
        d = np.where(movable, d, -np.inf)
        idx = int(np.argmax(d))
        labels[idx] = empty[0]
        centers[empty[0]] = x[idx]


def _inertia(x, centers, labels):
    diff = x - centers[labels]
    return float(np.einsum("nd,nd->", diff, diff))


def kmeans_cluster(features, K, seed=0, max_iter=100, tol=1e-4):
    """Lloyd iterations with k-means++ seeding.

    Assignment ties go to the lowest cluster index. Stops once no center
    moves by ``tol`` or more (Euclidean norm) or after ``max_iter`` rounds.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be an N x d matrix")
    n = x.shape[0]
    if K <= 0:
        raise ValueError("K must be positive")
    if K > n:
        raise ValueError(f"K={K} exceeds the number of nodes {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    rng = np.random.default_rng(seed)
    centers = _kpp_init(x, K, rng)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        labels = np.argmin(_sqdist(x, centers), axis=1)
        centers, labels = _repair_empty(x, centers, labels, K)
        new_centers = np.stack([x[labels == k].mean(axis=0) for k in range(K)])
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        history.append(_inertia(x, centers, labels))
        if shift < tol:
            break
    labels = np.argmin(_sqdist(x, centers), axis=1)
    centers, labels = _repair_empty(x, centers, labels, K)
    inertia = _inertia(x, centers, labels)
    return ClusterAssignment(labels, centers, inertia, K, seed, it, history)


def cluster_nodes(series, K=5, seed=0, max_iter=100, tol=1e-4, window=None,
                  dist=None, backend=None, threads=None):
    """K-means over each node's row of the DTW distance matrix.

    Pass a precomputed ``dist`` (a :class:`DtwMatrix` or array) to skip the
    DTW stage.
    """
    if dist is None:
        dist = dtw_matrix(series, window=window, backend=backend, threads=threads)
    if isinstance(dist, DtwMatrix):
        dist = dist.dist
    return kmeans_cluster(dist, K, seed=seed, max_iter=max_iter, tol=tol)


@dataclass(frozen=True)
class ClusterSubgraph:
    member_nodes: np.ndarray
    adjacency: np.ndarray

    @property
    def m(self):
        return len(self.member_nodes)


def build_cluster_subgraphs(adj, assignment):
    weights = adj.weights if isinstance(adj, AdjacencyMatrix) else np.asarray(adj, dtype=np.float64)
    labels = np.asarray(assignment.labels)
    if weights.shape != (labels.size, labels.size):
        raise ValueError(
            f"adjacency is {weights.shape} but assignment covers {labels.size} nodes")
    out = []
    for k in range(assignment.K):
        idx = np.flatnonzero(labels == k)
        out.append(ClusterSubgraph(idx, weights[np.ix_(idx, idx)].copy()))
    return out


def cosine_similarity_matrix(series):
    x = series.values if isinstance(series, TrafficSeries) else np.asarray(series, dtype=np.float64)
    norms = np.linalg.norm(x, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    unit = x / safe
    sim = unit.T @ unit
    sim[:, norms == 0] = 0.0
    sim[norms == 0, :] = 0.0
    sim = np.clip((sim + sim.T) / 2, -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    return sim


def write_matrix_csv(path, m):
    """Row-major matrix, no header, 6 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(m):
            fh.write(",".join(f"{v:.6g}" for v in row))
            fh.write("\n")
