"""DBSCAN over the combined location/embedding distance.

``d_ij^2 = beta * |x_i - x_j|^2 + (1 - beta) * |phi_i - phi_j|^2``. Since this
is a Euclidean distance on ``[sqrt(beta) x, sqrt(1 - beta) phi]``, neighbour
candidates come from a KD-tree on the scaled features and are then confirmed
with the exact expression.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

NOISE = -1


@dataclass(frozen=True)
class ClusteringConfig:
    beta: float = 0.5
    eps: float = 0.8
    min_pts: int = 3
    planar: bool = False  # use (x, y) instead of (x, y, z) for the location term

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.min_pts < 1:
            raise ValueError(f"min_pts must be >= 1, got {self.min_pts}")


def combined_sq_distance(xi, xj, phi_i, phi_j, beta: float) -> np.ndarray:
    dx = np.asarray(xi, dtype=np.float64) - np.asarray(xj, dtype=np.float64)
    dp = np.asarray(phi_i, dtype=np.float64) - np.asarray(phi_j, dtype=np.float64)
    return beta * (dx * dx).sum(-1) + (1 - beta) * (dp * dp).sum(-1)


def neighbourhoods(xyz: np.ndarray, phi: np.ndarray, beta: float, eps: float) -> list[np.ndarray]:
    """Sorted indices within ``eps`` (inclusive) of every point, self included."""
    n = len(xyz)
    if n == 0:
        return []
    feats = np.hstack([np.sqrt(beta) * xyz, np.sqrt(1 - beta) * phi])
    tree = cKDTree(feats)
    cand = tree.query_ball_point(feats, r=eps * (1 + 1e-9) + 1e-12)
    out = []
    eps2 = eps * eps
    for i, c in enumerate(cand):
        c = np.asarray(sorted(c), dtype=np.int64)
        d2 = combined_sq_distance(xyz[i], xyz[c], phi[i], phi[c], beta)
        out.append(c[d2 <= eps2])
    return out


def dbscan(xyz: np.ndarray, phi: np.ndarray, cfg: ClusteringConfig) -> np.ndarray:
    """Cluster labels ``0..k-1``; noise is ``NOISE``.

    Clusters are grown breadth-first from cores in index order; a border
    point joins the first cluster that reaches it.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64).reshape(len(xyz), -1)
    if cfg.planar:
        xyz = xyz[:, :2]
    nbrs = neighbourhoods(xyz, phi, cfg.beta, cfg.eps)
    core = np.array([len(nb) >= cfg.min_pts for nb in nbrs], dtype=bool)
    labels = np.full(len(xyz), NOISE, dtype=np.int64)
    cluster = 0
    for i in range(len(xyz)):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for q in nbrs[j]:
                if labels[q] == NOISE:
                    labels[q] = cluster
                    if core[q]:
                        queue.append(q)
        cluster += 1
    return labels


def cluster_unknowns(xyz: np.ndarray, phi: np.ndarray, cfg: ClusteringConfig) -> np.ndarray:
    """Instance labels ``0..m-1`` for the given points; noise becomes singletons."""
    labels = dbscan(xyz, phi, cfg)
    noise = np.flatnonzero(labels == NOISE)
    start = labels.max() + 1 if len(labels) else 0
    labels[noise] = start + np.arange(len(noise))
    return labels
