"""Synthetic episodes with controllable feature clusters.

Features are attached directly to each cloud so separability is set by the
spec rather than by a descriptor. Cluster directions are drawn from one
random orthonormal basis: class centres, background centres, per-class
within-object subspaces and per-class query shift directions never overlap
while the feature width allows it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pointcloud import Episode, PointCloud


@dataclass
class SynthSpec:
    n_way: int = 1
    k_shot: int = 1
    n_points: int = 2048
    feature_dim: int = 16
    fg_fraction: float = 0.25
    n_bg_clusters: int = 3
    # cosine between each background centre and the mean foreground direction
    bg_fg_cosine: float = -0.3
    center_norm: float = 1.0
    noise: float = 0.03
    # within-object variation, drawn inside a class-specific subspace
    part_spread: float = 0.15
    part_dims: int = 2
    # query foreground offset along a direction no support point uses
    shift: float = 0.0
    distractor_count: int = 0
    distractor_cosine: float = 0.95
    # explicit centres override the random basis: n_way + n_bg_clusters rows
    centers: list | None = None

    def validate(self):
        if self.n_way < 1 or self.k_shot < 1:
            raise ValueError("n_way and k_shot must be >= 1")
        n_fg = int(round(self.fg_fraction * self.n_points))
        if n_fg < 1:
            raise ValueError("spec yields zero foreground points per class")
        if self.n_way * n_fg + self.distractor_count >= self.n_points:
            raise ValueError("foreground and distractor points leave no background")
        if not -1.0 < self.bg_fg_cosine < 1.0:
            raise ValueError("bg_fg_cosine must lie in (-1, 1)")
        if self.n_bg_clusters < 1:
            raise ValueError("need at least one background cluster")
        if not 0.9 < self.distractor_cosine < 1.0 and self.distractor_count:
            raise ValueError("distractor_cosine must lie in (0.9, 1)")
        if self.centers is not None:
            c = np.asarray(self.centers, dtype=float)
            if c.shape != (self.n_way + self.n_bg_clusters, self.feature_dim):
                raise ValueError(f"centers must have shape {(self.n_way + self.n_bg_clusters, self.feature_dim)}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class _Basis:
    centers: np.ndarray
    bg: np.ndarray
    parts: list = field(default_factory=list)
    shifts: list = field(default_factory=list)


def _basis(spec: SynthSpec, rng) -> _Basis:
    d = spec.feature_dim
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    cols = iter(range(d))

    def take(n):
        out = []
        for _ in range(n):
            j = next(cols, None)
            if j is None:
                # out of orthogonal room: fall back to random unit directions
                v = rng.standard_normal(d)
                out.append(v / np.linalg.norm(v))
            else:
                out.append(q[:, j])
        return np.array(out).reshape(n, d)

    if spec.centers is not None:
        c = np.asarray(spec.centers, dtype=float)
        centers, bg = c[:spec.n_way], c[spec.n_way:]
        # keep consuming the basis so part/shift directions stay well defined
        take(spec.n_way + spec.n_bg_clusters)
    else:
        centers = take(spec.n_way) * spec.center_norm
        fg_dir = centers.sum(axis=0)
        fg_dir /= np.linalg.norm(fg_dir)
        k = spec.bg_fg_cosine
        bg = (np.sqrt(1.0 - k**2) * take(spec.n_bg_clusters) + k * fg_dir) * spec.center_norm
    parts = [take(spec.part_dims) for _ in range(spec.n_way)]
    shifts = [take(1)[0] for _ in range(spec.n_way)]
    return _Basis(centers, bg, parts, shifts)


def _class_rows(basis: _Basis, spec: SynthSpec, n: int, count: int, rng, query: bool) -> np.ndarray:
    c = basis.centers[n]
    coef = rng.standard_normal((count, spec.part_dims)) * spec.part_spread * np.linalg.norm(c)
    rows = c + coef @ basis.parts[n]
    if query and spec.shift:
        rows = rows + spec.shift * np.linalg.norm(c) * basis.shifts[n]
    return rows + rng.standard_normal((count, spec.feature_dim)) * spec.noise


def _distractor_rows(basis: _Basis, spec: SynthSpec, count: int, rng) -> np.ndarray:
    """Background rows at a fixed cosine to a foreground centre.

    Noise is drawn orthogonal to the in-plane mix and rescaled so the
    cosine to the centre stays above 0.9.
    """
    rows = []
    for i in range(count):
        n = i % spec.n_way
        c_hat = basis.centers[n] / np.linalg.norm(basis.centers[n])
        b = basis.bg[i % len(basis.bg)]
        b = b - (b @ c_hat) * c_hat
        b_hat = b / np.linalg.norm(b)
        cos = spec.distractor_cosine
        y = cos * c_hat + np.sqrt(1.0 - cos**2) * b_hat
        eps = rng.standard_normal(spec.feature_dim) * spec.noise
        eps -= (eps @ c_hat) * c_hat
        # cap the perpendicular noise so the cosine cannot fall to 0.9
        cap = 0.5 * (np.sqrt(1.0 / 0.9**2 - 1.0) * cos - np.sqrt(1.0 - cos**2))
        nrm = np.linalg.norm(eps)
        if nrm > cap:
            eps *= cap / nrm
        rows.append((y + eps) * np.linalg.norm(basis.centers[n]))
    return np.array(rows).reshape(count, spec.feature_dim)


def _cloud(spec: SynthSpec, basis: _Basis, rng, fg_classes: list, query: bool):
    """Build one cloud; ``fg_classes`` lists (class index, label) pairs."""
    m = spec.n_points
    n_fg = int(round(spec.fg_fraction * m))
    n_dis = spec.distractor_count if query else 0
    feats, labels, blobs = [], [], []
    for n, label in fg_classes:
        feats.append(_class_rows(basis, spec, n, n_fg, rng, query))
        labels.append(np.full(n_fg, label))
        blobs.append(np.full(n_fg, n))
    if n_dis:
        feats.append(_distractor_rows(basis, spec, n_dis, rng))
        labels.append(np.zeros(n_dis, dtype=int))
        blobs.append(np.full(n_dis, spec.n_way))
    n_bg = m - sum(len(l) for l in labels)
    which = rng.integers(spec.n_bg_clusters, size=n_bg)
    bg = basis.bg[which] + rng.standard_normal((n_bg, spec.feature_dim)) * spec.noise
    feats.append(bg)
    labels.append(np.zeros(n_bg, dtype=int))
    blobs.append(spec.n_way + 1 + which)

    feats = np.concatenate(feats).astype(np.float32)
    labels = np.concatenate(labels).astype(np.int64)
    blobs = np.concatenate(blobs)
    # spatial layout: one gaussian blob per cluster inside a 1 m block
    anchors = rng.uniform(0.15, 0.85, size=(blobs.max() + 1, 3))
    pos = anchors[blobs] + rng.standard_normal((m, 3)) * 0.05
    perm = rng.permutation(m)
    return PointCloud(pos[perm].astype(np.float32)), labels[perm], feats[perm]


def generate_synthetic_episode(spec: SynthSpec, rng: np.random.Generator) -> Episode:
    spec.validate()
    basis = _basis(spec, rng)
    support, support_masks, support_feats = [], [], []
    for n in range(spec.n_way):
        clouds, masks, feats = [], [], []
        for _ in range(spec.k_shot):
            # support for way n annotates only its own class; other ways do not appear
            cloud, labels, f = _cloud(spec, basis, rng, [(n, n + 1)], query=False)
            clouds.append(cloud)
            masks.append(labels)
            feats.append(f)
        support.append(clouds)
        support_masks.append(masks)
        support_feats.append(feats)
    q_cloud, q_labels, q_feats = _cloud(spec, basis, rng, [(n, n + 1) for n in range(spec.n_way)], query=True)
    return Episode(
        n_way=spec.n_way,
        k_shot=spec.k_shot,
        support=support,
        support_masks=support_masks,
        query=q_cloud,
        query_gt=q_labels,
        support_features=support_feats,
        query_features=q_feats,
        class_ids=list(range(1, spec.n_way + 1)),
        meta={"distractor": spec.distractor_count > 0, "distractor_count": spec.distractor_count},
    )
