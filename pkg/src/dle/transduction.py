"""Multi-prototype transductive inference by label propagation on a k-NN graph.

Query points and prototypes share one graph. Prototype rows are seeded with
one-hot labels and the labels diffuse over Gaussian-weighted k-NN edges.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .numerics import as_matrix
from .sampling import fps_kmeans

CLOSED_FORM_MAX_NODES = 500


@dataclass
class PrototypeSet:
    features: np.ndarray
    labels: np.ndarray          # class id per prototype, 0 = background
    empty_classes: list


@dataclass
class PropagationGraph:
    nodes: np.ndarray
    affinity: sp.csr_matrix     # symmetric, nonnegative, zero diagonal
    normalized: sp.csr_matrix   # D^-1/2 W D^-1/2
    k: int
    sigma: float

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]


def derive_prototypes(F_q, final_mask, n_classes: int, n_fg_proto: int, bg_prototypes,
                      rng: np.random.Generator, kmeans_iters: int = 20) -> PrototypeSet:
    if n_fg_proto < 1:
        raise ValueError("n_fg_proto must be >= 1")
    F_q = as_matrix(F_q, "F_q")
    final_mask = np.asarray(final_mask)
    feats, labels, empty = [], [], []
    for cid in range(1, n_classes + 1):
        rows = F_q[final_mask == cid]
        if rows.shape[0] == 0:
            empty.append(cid)
            continue
        k = min(n_fg_proto, rows.shape[0])
        feats.append(fps_kmeans(rows, k, rng, max_iters=kmeans_iters).centroids)
        labels.append(np.full(k, cid))
    bg = as_matrix(bg_prototypes, "bg_prototypes")
    feats.append(bg)
    labels.append(np.zeros(bg.shape[0], dtype=np.int64))
    return PrototypeSet(np.concatenate(feats).astype(np.float32),
                        np.concatenate(labels).astype(np.int64), empty)


def median_pairwise_distance(X) -> float:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] > 3000:
        # median of a fixed strided subsample; keeps the cost bounded and deterministic
        X = X[:: int(np.ceil(X.shape[0] / 3000))]
    return float(np.median(pdist(X)))


def build_graph(nodes, k: int = 10, sigma: float | None = None) -> PropagationGraph:
    """Gaussian k-NN affinity, symmetrised by elementwise max, then D^-1/2 W D^-1/2."""
    X = np.asarray(nodes, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or k >= n:
        raise ValueError(f"need 1 <= k < node count, got k={k}, nodes={n}")
    if sigma is None:
        sigma = median_pairwise_distance(X)
        if sigma <= 0:
            sigma = 1.0
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    dist, idx = cKDTree(X).query(X, k=k + 1)
    is_self = idx == np.arange(n)[:, None]
    # with duplicate points the self match may not be returned; drop the farthest instead
    is_self[~is_self.any(axis=1), -1] = True
    keep = ~is_self
    rows = np.repeat(np.arange(n), k + 1).reshape(n, k + 1)[keep]
    vals = np.exp(-dist[keep] ** 2 / (2.0 * sigma**2))
    W = sp.csr_matrix((vals, (rows, idx[keep])), shape=(n, n))
    W = W.maximum(W.T).tocsr()
    W.setdiag(0.0)
    W.eliminate_zeros()
    deg = np.asarray(W.sum(axis=1)).ravel()
    inv = 1.0 / np.sqrt(np.maximum(deg, np.finfo(float).eps))
    D = sp.diags(inv)
    S = (D @ W @ D).tocsr()
    return PropagationGraph(X.astype(np.float32), W, S, k, float(sigma))


def seed_matrix(n_nodes: int, seed_rows, seed_labels, n_classes: int) -> np.ndarray:
    """One-hot rows over ``n_classes + 1`` labels for seeded nodes, zeros elsewhere."""
    Y = np.zeros((n_nodes, n_classes + 1))
    Y[np.asarray(seed_rows), np.asarray(seed_labels)] = 1.0
    return Y


def propagate(graph: PropagationGraph, Y, alpha: float = 0.99, iters: int = 50,
              tol: float = 1e-6, history: list | None = None) -> np.ndarray:
    """Iterate F <- alpha S F + (1 - alpha) Y starting from Y.

    Stops after ``iters`` steps or once the max-abs update drops below ``tol``.
    If ``history`` is given, each step's max-abs update is appended to it.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    Y = np.asarray(Y, dtype=np.float64)
    F = Y.copy()
    for _ in range(iters):
        nxt = alpha * (graph.normalized @ F) + (1.0 - alpha) * Y
        delta = float(np.max(np.abs(nxt - F))) if F.size else 0.0
        F = nxt
        if history is not None:
            history.append(delta)
        if delta < tol:
            break
    return F


def propagate_closed_form(graph: PropagationGraph, Y, alpha: float = 0.99) -> np.ndarray:
    """Fixed point of :func:`propagate`: (1 - alpha) (I - alpha S)^-1 Y."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    n = graph.n_nodes
    if n > CLOSED_FORM_MAX_NODES:
        raise ValueError(f"closed form limited to {CLOSED_FORM_MAX_NODES} nodes, graph has {n}")
    A = np.eye(n) - alpha * graph.normalized.toarray()
    return (1.0 - alpha) * np.linalg.solve(A, np.asarray(Y, dtype=np.float64))


def predict(distributions, n_query: int) -> np.ndarray:
    """Argmax label of the first ``n_query`` rows; ties go to the lowest class id."""
    D = np.asarray(distributions)
    if D.shape[0] < n_query:
        raise ValueError("distributions do not cover every query row")
    return np.argmax(D[:n_query], axis=1).astype(np.int64)


def transductive_inference(F_q, prototypes: PrototypeSet, n_classes: int, *, k: int = 10,
                           sigma: float | None = None, alpha: float = 0.99,
                           iters: int = 50) -> np.ndarray:
    """Query rows first, prototype rows after; returns per-query labels."""
    F_q = as_matrix(F_q, "F_q")
    m = F_q.shape[0]
    nodes = np.concatenate([F_q, prototypes.features], axis=0)
    graph = build_graph(nodes, k=min(k, nodes.shape[0] - 1), sigma=sigma)
    Y = seed_matrix(nodes.shape[0], m + np.arange(prototypes.features.shape[0]), prototypes.labels, n_classes)
    return predict(propagate(graph, Y, alpha=alpha, iters=iters), m)
