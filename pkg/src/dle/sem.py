"""Self-expansion: grow the confident region by in-query similarity, keep only
cyclically consistent additions, adapt background prototypes to the query."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, attention_weights, masked_cross_attention
from .numerics import as_matrix, pairwise_cosine
from .sampling import fps_kmeans
from .slm import threshold_argmax

DEFAULT_THETA = 0.8
DEFAULT_N_BG_PROTO = 5


@dataclass(frozen=True)
class SEMParams:
    mca: AttentionParams
    theta: float = DEFAULT_THETA
    n_bg_proto: int = DEFAULT_N_BG_PROTO

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if self.n_bg_proto < 1:
            raise ValueError("n_bg_proto must be >= 1")


@dataclass
class BackgroundPrototypes:
    raw: np.ndarray
    adapted: np.ndarray | None = None


@dataclass
class ExpansionResult:
    target_prototypes: list          # per class: vector, or None for a class with no confident seed
    w3: np.ndarray
    expanded: np.ndarray
    filtered: np.ndarray
    final: np.ndarray
    no_seed: list = field(default_factory=list)


def target_prototype(F_q, confident, class_id: int):
    """Mean query feature over the confident points of ``class_id``; None if there are none."""
    F_q = np.asarray(F_q, dtype=np.float64)
    sel = np.asarray(confident) == class_id
    if not sel.any():
        return None
    return F_q[sel].mean(axis=0).astype(np.float32)


def expansion_scores(prototypes: list, F_q) -> np.ndarray:
    """Cosine of every query row to each class's target prototype.

    A class without a prototype gets a row of -1, which can never clear a
    positive threshold.
    """
    F_q = as_matrix(F_q, "F_q")
    w3 = np.full((len(prototypes), F_q.shape[0]), -1.0, dtype=np.float32)
    for n, p in enumerate(prototypes):
        if p is not None:
            w3[n] = pairwise_cosine(np.asarray(p)[None, :], F_q)[0]
    return w3


def expand(w3, theta: float = DEFAULT_THETA) -> np.ndarray:
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    return threshold_argmax(w3, theta)


def nearest_neighbors(F_q, rows, block: int = 1024) -> np.ndarray:
    """Index of the most cosine-similar query point to each of ``rows``, self excluded.

    Ties resolve to the lowest index.
    """
    F = np.asarray(F_q, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(F, axis=1), 1e-8)
    U = F / norms[:, None]
    rows = np.asarray(rows, dtype=np.int64)
    out = np.empty(rows.shape[0], dtype=np.int64)
    for start in range(0, rows.shape[0], block):
        r = rows[start:start + block]
        sim = U[r] @ U.T
        sim = np.clip(sim, -1.0, 1.0)
        sim[np.arange(r.shape[0]), r] = -np.inf
        out[start:start + block] = np.argmax(sim, axis=1)
    return out


def cyclic_filter(F_q, confident, expanded) -> np.ndarray:
    """Drop expanded points whose nearest query neighbour is outside the seed region.

    A point expanded to class n that was not already confident for n is kept
    only if its nearest neighbour (cosine, self excluded) is confident for n.
    Points confident for a different class are left to the confident mask.
    """
    confident = np.asarray(confident, dtype=np.int64)
    expanded = np.asarray(expanded, dtype=np.int64)
    if confident.shape != expanded.shape:
        raise ValueError("confident and expanded masks differ in length")
    filtered = expanded.copy()
    new = np.flatnonzero((expanded > 0) & (confident != expanded))
    if new.size == 0:
        return filtered
    contested = confident[new] > 0
    filtered[new[contested]] = 0
    cand = new[~contested]
    if cand.size:
        nn = nearest_neighbors(F_q, cand)
        keep = confident[nn] == expanded[cand]
        filtered[cand[~keep]] = 0
    return filtered


def merge_masks(confident, filtered) -> np.ndarray:
    """Confident labels win; filtered expansion fills the rest."""
    confident = np.asarray(confident, dtype=np.int64)
    return np.where(confident > 0, confident, np.asarray(filtered, dtype=np.int64))


def background_prototypes(support_bg, n_proto: int, rng: np.random.Generator,
                          kmeans_iters: int = 20) -> BackgroundPrototypes:
    support_bg = np.asarray(support_bg, dtype=np.float32)
    if support_bg.ndim != 2 or support_bg.shape[0] == 0:
        raise ValueError("no support background features")
    k = n_proto
    if support_bg.shape[0] < n_proto:
        warnings.warn(f"{support_bg.shape[0]} background points < {n_proto} prototypes; "
                      f"using {support_bg.shape[0]}", RuntimeWarning, stacklevel=2)
        k = support_bg.shape[0]
    return BackgroundPrototypes(fps_kmeans(support_bg, k, rng, max_iters=kmeans_iters).centroids)


def adapt_background(P_b, F_q, final_mask, params: SEMParams) -> np.ndarray:
    """Residual masked cross-attention from background prototypes onto query background."""
    P_b = as_matrix(P_b, "P_b")
    allowed = np.asarray(final_mask) == 0
    if not allowed.any():
        warnings.warn("every query point is foreground; background prototypes left unadapted",
                      RuntimeWarning, stacklevel=2)
        return P_b.copy()
    out = masked_cross_attention(P_b, F_q, allowed, params.mca)
    return (P_b.astype(np.float64) + out).astype(np.float32)


def background_attention_mass(P_b, F_q, final_mask, params: SEMParams) -> np.ndarray:
    """Per-prototype attention weight that lands on foreground positions."""
    allowed = np.asarray(final_mask) == 0
    w = attention_weights(P_b, F_q, params.mca, allowed=allowed)
    return w[:, ~allowed].astype(np.float64).sum(axis=1)


def self_loss(final_mask, gt_mask) -> float:
    """Share of ground-truth background points predicted as foreground."""
    pred = np.asarray(final_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in length")
    bg = gt == 0
    if not bg.any():
        raise ValueError("self loss needs at least one ground-truth background point")
    return float(np.sum((pred > 0) & bg) / np.sum(bg))


def run_sem(F_q, confident, n_classes: int, theta: float = DEFAULT_THETA) -> ExpansionResult:
    """Target prototypes, expansion, cyclic filtering and merge for one query."""
    confident = np.asarray(confident, dtype=np.int64)
    protos = [target_prototype(F_q, confident, n + 1) for n in range(n_classes)]
    no_seed = [n + 1 for n, p in enumerate(protos) if p is None]
    w3 = expansion_scores(protos, F_q)
    expanded = expand(w3, theta)
    filtered = cyclic_filter(F_q, confident, expanded)
    return ExpansionResult(protos, w3, expanded, filtered, merge_masks(confident, filtered), no_seed)
