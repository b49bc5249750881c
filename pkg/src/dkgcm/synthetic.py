"""Synthetic two-regime traffic data with a known node partition."""
from __future__ import annotations

import numpy as np

from .dataio import AdjacencyMatrix, TrafficSeries


def two_group_series(n_nodes=20, T=2000, period=24, snr=10.0, seed=0):
    """Half the nodes carry phase-shifted sinusoids, the other half sawtooth
    ramps; Gaussian noise with std = signal std / ``snr`` is added per node.

    Returns (series, labels) where labels[i] is the generating group.
    """
    if n_nodes < 2:
        raise ValueError("need at least two nodes")
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=np.float64)
    labels = np.arange(n_nodes) >= n_nodes // 2
    values = np.empty((T, n_nodes))
    for i in range(n_nodes):
        shift = rng.uniform(0, period / 4)
        if not labels[i]:
            signal = np.sin(2 * np.pi * (t + shift) / period)
        else:
            signal = 2.0 * (((t + shift) / period) % 1.0) - 1.0
        level = rng.uniform(50, 150)
        scale = rng.uniform(20, 40)
        signal = level + scale * signal
        noise = rng.standard_normal(T) * signal.std() / snr
        values[:, i] = signal + noise
    ids = [f"n{i:02d}" for i in range(n_nodes)]
    return TrafficSeries(values, ids), labels.astype(np.int64)


def chain_adjacency(node_ids, labels=None):
    """Chain graph; when ``labels`` are given, edges link only nodes of the
    same group so each group forms its own path."""
    n = len(node_ids)
    w = np.zeros((n, n))
    order = np.arange(n) if labels is None else np.argsort(labels, kind="stable")
    for a, b in zip(order[:-1], order[1:]):
        if labels is None or labels[a] == labels[b]:
            w[a, b] = w[b, a] = 1.0
    return AdjacencyMatrix(w, list(node_ids))
