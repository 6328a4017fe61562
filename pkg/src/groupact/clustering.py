"""K-means over query vectors: Lloyd iterations and mini-batch updates.

Everything here works on plain float64 arrays and is deterministic under a
seed. Assignments are consumed by the model as constants; gradients never
flow through the clustering (nearest-centroid argmin is piecewise constant).

Tie-breaking is by lowest index throughout: nearest-centroid ties pick the
lower cluster, donor selection picks the lower point. That makes every
downstream permutation statement testable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class ClusteringError(ValueError):
    """Clustering received inputs it cannot work with (e.g. non-finite)."""


@dataclass(frozen=True)
class ClusterState:
    centroids: np.ndarray  # [C, D] float64
    counts: np.ndarray     # [C] int64 update counters (mini-batch step sizes)
    seed: int

    @property
    def C(self):
        return self.centroids.shape[0]


def _sq_dists(points, centroids):
    diff = points[:, None, :] - centroids[None, :, :]
    return (diff * diff).sum(axis=-1)  # [N, C]


def assign(points, state):
    """Nearest-centroid labels; argmin breaks ties toward the lower index."""
    return _sq_dists(points, state.centroids).argmin(axis=1)


def wcss(points, centroids):
    """Within-cluster sum of squares under nearest-centroid assignment."""
    return float(_sq_dists(points, centroids).min(axis=1).sum())


def lloyd_step(points, state):
    """One full-batch update: assign, recenter, repair empty clusters.

    An empty cluster steals the point farthest from the centroid of the
    largest cluster (the donor keeps its mean until the next step). Donors
    must have at least two members; with fewer points than clusters the
    leftover clusters simply stay empty.
    """
    labels = assign(points, state)
    centroids = state.centroids.copy()
    counts = np.bincount(labels, minlength=state.C)
    for c in range(state.C):
        if counts[c] > 0:
            centroids[c] = points[labels == c].mean(axis=0)
    for c in range(state.C):
        if counts[c] > 0:
            continue
        donors = np.flatnonzero(counts >= 2)
        if donors.size == 0:
            continue
        donor = donors[np.argmax(counts[donors])]
        member_idx = np.flatnonzero(labels == donor)
        dist = ((points[member_idx] - centroids[donor]) ** 2).sum(axis=1)
        stolen = member_idx[np.argmax(dist)]
        centroids[c] = points[stolen]
        labels[stolen] = c
        counts[donor] -= 1
        counts[c] += 1
    return ClusterState(centroids=centroids, counts=state.counts.copy(), seed=state.seed)


def minibatch_step(points, state):
    """Streaming update: each point moves its centroid by 1/count.

    Points are folded in order; the per-cluster counter increments before
    the step, so the first point a cluster ever sees replaces the centroid
    and a repeated point is a fixed point.
    """
    if not np.isfinite(points).all():
        raise ClusteringError("minibatch_step: points contain non-finite values")
    centroids = state.centroids.copy()
    counts = state.counts.copy()
    for x in points:
        c = int(((centroids - x) ** 2).sum(axis=1).argmin())
        counts[c] += 1
        centroids[c] += (x - centroids[c]) / counts[c]
    return ClusterState(centroids=centroids, counts=counts, seed=state.seed)


def init_centroids(points, C, seed):
    """Distance-weighted (k-means++ style) seeding, deterministic per seed.

    With identical points every centroid collapses onto that point. C larger
    than the point count falls back to cycling through the points and warns.
    """
    points = np.asarray(points, dtype=np.float64)
    N = points.shape[0]
    rng = np.random.default_rng(seed)
    if C > N:
        warnings.warn(f"init_centroids: C={C} exceeds {N} points; duplicating points")
        centroids = points[np.arange(C) % N].copy()
        return ClusterState(centroids=centroids, counts=np.zeros(C, dtype=np.int64), seed=seed)
    chosen = [int(rng.integers(N))]
    while len(chosen) < C:
        d2 = _sq_dists(points, points[chosen]).min(axis=1)
        total = d2.sum()
        if total == 0.0:
            nxt = 0
        else:
            nxt = int(rng.choice(N, p=d2 / total))
        chosen.append(nxt)
    return ClusterState(centroids=points[chosen].copy(),
                        counts=np.zeros(C, dtype=np.int64), seed=seed)


def kmeans(points, C, seed, iters=5):
    """Seeded init plus ``iters`` Lloyd steps; returns (state, labels)."""
    if not np.isfinite(points).all():
        raise ClusteringError("kmeans: points contain non-finite values")
    state = init_centroids(points, C, seed)
    for _ in range(iters):
        state = lloyd_step(points, state)
    return state, assign(points, state)
