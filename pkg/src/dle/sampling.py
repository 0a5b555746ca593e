"""Farthest point sampling and Lloyd's K-means over feature rows."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int = 0
    # inertia after each update step, for monotonicity checks
    history: list = field(default_factory=list)


def farthest_point_sampling(F, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy max-min subset selection in Euclidean feature space.

    The first index is drawn uniformly from ``rng``; ties in the greedy
    step go to the lowest index. Returns ``k`` distinct indices in
    selection order.
    """
    F = np.asarray(F, dtype=np.float64)
    m = F.shape[0]
    if k < 1 or k > m:
        raise ValueError(f"need 1 <= k <= m, got k={k}, m={m}")
    selected = np.empty(k, dtype=np.int64)
    selected[0] = rng.integers(m)
    min_d = np.sum((F - F[selected[0]]) ** 2, axis=1)
    taken = np.zeros(m, dtype=bool)
    taken[selected[0]] = True
    for i in range(1, k):
        # selected points have distance 0; mask them so duplicates never repeat an index
        cand = np.where(taken, -1.0, min_d)
        nxt = int(np.argmax(cand))
        selected[i] = nxt
        taken[nxt] = True
        min_d = np.minimum(min_d, np.sum((F - F[nxt]) ** 2, axis=1))
    return selected


def _sq_dists(F, C):
    d = (F * F).sum(1)[:, None] - 2.0 * F @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(F, k: int, max_iters: int = 50, rng: np.random.Generator | None = None,
           init=None) -> KMeansResult:
    """Lloyd's algorithm.

    ``init`` is either an index array into ``F`` or a ``k x d`` centroid
    matrix. Without it the seeds come from farthest point sampling driven
    by ``rng``.
    """
    F = np.asarray(F, dtype=np.float64)
    m = F.shape[0]
    if k < 1 or k > m:
        raise ValueError(f"need 1 <= k <= m, got k={k}, m={m}")
    if init is None:
        if rng is None:
            raise ValueError("kmeans needs either init or rng")
        init = farthest_point_sampling(F, k, rng)
    init = np.asarray(init)
    if init.ndim == 1:
        C = F[init.astype(np.int64)].copy()
    else:
        C = np.asarray(init, dtype=np.float64).copy()
    if C.shape != (k, F.shape[1]):
        raise ValueError(f"init gives centroids of shape {C.shape}, expected {(k, F.shape[1])}")

    assign = None
    history = []
    n_iter = 0
    for n_iter in range(1, max(max_iters, 1) + 1):
        new_assign = _repair_empty(F, C, np.argmin(_sq_dists(F, C), axis=1), k)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        C = _means(F, assign, k)
        history.append(float(np.sum((F - C[assign]) ** 2)))
    inertia = float(np.sum((F - C[assign]) ** 2))
    return KMeansResult(C.astype(np.float32), assign.astype(np.int64), inertia, n_iter, history)


def _means(F, assign, k):
    sums = np.zeros((k, F.shape[1]))
    np.add.at(sums, assign, F)
    return sums / np.bincount(assign, minlength=k)[:, None]


def _repair_empty(F, C, assign, k):
    """Move the point farthest from its centroid into each empty cluster."""
    counts = np.bincount(assign, minlength=k)
    if counts.min() > 0:
        return assign
    assign = assign.copy()
    resid = np.sum((F - C[assign]) ** 2, axis=1)
    for j in np.flatnonzero(counts == 0):
        donors = counts[assign] > 1
        cand = np.where(donors, resid, -1.0)
        p = int(np.argmax(cand))
        counts[assign[p]] -= 1
        assign[p] = j
        counts[j] = 1
        resid[p] = -1.0
    return assign


def fps_kmeans(F, k: int, rng: np.random.Generator, max_iters: int = 20) -> KMeansResult:
    """K-means seeded with farthest point sampling picks."""
    return kmeans(F, k, max_iters=max_iters, init=farthest_point_sampling(F, k, rng))
