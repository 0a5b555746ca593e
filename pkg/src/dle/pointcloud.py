"""Point clouds, episodes, ASCII PLY I/O, block partitioning and a geometric descriptor."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .numerics import read_fmat, write_fmat

FEATURE_DIM = 11


class PLYError(ValueError):
    pass


class PLYHeaderError(PLYError):
    pass


class PLYMissingPropertyError(PLYError):
    pass


class PLYTruncatedError(PLYError):
    pass


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float32)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError(f"positions must be M x 3 with M >= 1, got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions contain non-finite coordinates")
        object.__setattr__(self, "positions", pos)
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.float32)
            if col.shape != pos.shape:
                raise ValueError("colors must match positions in shape")
            object.__setattr__(self, "colors", col)

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class Episode:
    n_way: int
    k_shot: int
    support: list            # [n][k] PointCloud
    support_masks: list      # [n][k] int label arrays; way n foreground is label n + 1
    query: PointCloud
    query_gt: np.ndarray | None = None
    support_features: list | None = None
    query_features: np.ndarray | None = None
    class_ids: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.support) != self.n_way or any(len(s) != self.k_shot for s in self.support):
            raise ValueError("support must hold n_way x k_shot clouds")
        for n in range(self.n_way):
            for k in range(self.k_shot):
                mask = np.asarray(self.support_masks[n][k])
                if mask.shape[0] != len(self.support[n][k]):
                    raise ValueError(f"support mask ({n},{k}) length does not match its cloud")
                if not np.any(mask == n + 1):
                    raise ValueError(f"support shot ({n},{k}) has no foreground point of class {n + 1}")
        if self.query_gt is not None and len(self.query_gt) != len(self.query):
            raise ValueError("query ground truth length does not match the query cloud")
        if not self.class_ids:
            self.class_ids = list(range(1, self.n_way + 1))


# ---------------------------------------------------------------- PLY

def load_ply(path) -> PointCloud:
    """Read the ASCII PLY subset: vertex x/y/z floats, optional uchar red/green/blue."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PLYHeaderError(f"{path}: missing 'ply' magic line")
    n_vertex = None
    props = []
    in_vertex = False
    end = None
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise PLYHeaderError(f"{path}: only ascii PLY is supported")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PLYHeaderError(f"{path}: malformed element line {line!r}")
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tok[2])
                except ValueError as e:
                    raise PLYHeaderError(f"{path}: bad vertex count {tok[2]!r}") from e
        elif tok[0] == "property":
            if len(tok) < 3:
                raise PLYHeaderError(f"{path}: malformed property line {line!r}")
            if in_vertex:
                props.append(tok[-1])
        elif tok[0] == "end_header":
            end = i + 1
            break
        elif tok[0] not in ("comment", "obj_info"):
            raise PLYHeaderError(f"{path}: unexpected header line {line!r}")
    if end is None:
        raise PLYHeaderError(f"{path}: no end_header")
    if n_vertex is None:
        raise PLYHeaderError(f"{path}: no vertex element")
    for axis in "xyz":
        if axis not in props:
            raise PLYMissingPropertyError(f"{path}: vertex property {axis!r} missing")
    body = [l for l in lines[end:] if l.strip()]
    if len(body) < n_vertex:
        raise PLYTruncatedError(f"{path}: header declares {n_vertex} vertices, body has {len(body)}")
    if len(body) > n_vertex:
        # trailing rows would belong to further elements, which this subset does not read
        body = body[:n_vertex]
    try:
        data = np.array([[float(v) for v in l.split()] for l in body], dtype=np.float64)
    except ValueError as e:
        raise PLYError(f"{path}: non-numeric vertex data") from e
    if data.ndim != 2 or data.shape[1] != len(props):
        raise PLYTruncatedError(f"{path}: vertex rows do not match {len(props)} declared properties")
    idx = {p: j for j, p in enumerate(props)}
    pos = data[:, [idx["x"], idx["y"], idx["z"]]]
    colors = None
    if all(c in idx for c in ("red", "green", "blue")):
        colors = data[:, [idx["red"], idx["green"], idx["blue"]]] / 255.0
    return PointCloud(pos, colors)


def write_ply(path, cloud: PointCloud) -> None:
    m = len(cloud)
    header = ["ply", "format ascii 1.0", f"element vertex {m}",
              "property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    rows = []
    rgb = None
    if cloud.colors is not None:
        rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(int)
    for i in range(m):
        x, y, z = cloud.positions[i]
        row = f"{x:.7g} {y:.7g} {z:.7g}"
        if rgb is not None:
            row += f" {rgb[i, 0]} {rgb[i, 1]} {rgb[i, 2]}"
        rows.append(row)
    Path(path).write_text("\n".join(header + rows) + "\n")


def write_labels(path, labels) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def read_labels(path) -> np.ndarray:
    text = Path(path).read_text().split()
    try:
        return np.array([int(t) for t in text], dtype=np.int64)
    except ValueError as e:
        raise ValueError(f"{path}: labels must be one integer per line") from e


# ---------------------------------------------------------------- blocks

@dataclass(frozen=True)
class Block:
    cloud: PointCloud
    indices: np.ndarray     # row i of the block is row indices[i] of the source cloud
    cell: tuple


def block_partition(cloud: PointCloud, block_size: float = 1.0, points_per_block: int = 2048,
                    rng: np.random.Generator | None = None) -> list:
    """Split on an axis-aligned XY grid and resample every non-empty cell.

    Cells holding fewer than ``points_per_block`` points are sampled with
    replacement, larger ones without.
    """
    if block_size <= 0:
        raise ValueError("block_size must be positive")
    if points_per_block < 1:
        raise ValueError("points_per_block must be >= 1")
    if rng is None:
        raise ValueError("block_partition needs an rng")
    xy = cloud.positions[:, :2].astype(np.float64)
    lo = xy.min(axis=0)
    extent = xy.max(axis=0) - lo
    n_cells = np.maximum(np.ceil(extent / block_size).astype(int), 1)
    cell = np.minimum(np.floor((xy - lo) / block_size).astype(int), n_cells - 1)
    blocks = []
    for cx in range(n_cells[0]):
        for cy in range(n_cells[1]):
            members = np.flatnonzero((cell[:, 0] == cx) & (cell[:, 1] == cy))
            if members.size == 0:
                continue
            replace = members.size < points_per_block
            pick = rng.choice(members, size=points_per_block, replace=replace)
            colors = None if cloud.colors is None else cloud.colors[pick]
            blocks.append(Block(PointCloud(cloud.positions[pick], colors), pick, (cx, cy)))
    return blocks


# ---------------------------------------------------------------- features

def _sign_fix(normals: np.ndarray) -> np.ndarray:
    """Orient normals toward +z; horizontal normals toward +x, then +y."""
    nx, ny, nz = normals.T
    tiny = 1e-9
    flip = (nz < -tiny) | ((np.abs(nz) <= tiny) & (nx < -tiny)) \
        | ((np.abs(nz) <= tiny) & (np.abs(nx) <= tiny) & (ny < -tiny))
    out = normals.copy()
    out[flip] *= -1.0
    return out


def extract_features(cloud: PointCloud, k_neighbors: int = 16) -> np.ndarray:
    """Translation-invariant 11-channel descriptor per point.

    Channels: height above the cloud minimum, k-NN principal-axis normal
    (3, oriented to +z), median-normalised local density, colour (3, zeros
    if absent), centroid-centred xyz over the bounding-box diagonal (3).
    """
    m = len(cloud)
    if k_neighbors < 1 or k_neighbors >= m:
        raise ValueError(f"need 1 <= k_neighbors < M, got k={k_neighbors}, M={m}")
    pos = cloud.positions.astype(np.float64)
    # translation invariance is exact only in relative coordinates
    rel = pos - pos.mean(axis=0)
    tree = cKDTree(rel)
    dist, idx = tree.query(rel, k=k_neighbors + 1)
    dist, idx = dist[:, 1:], idx[:, 1:]

    nbr = rel[idx]                                       # M x k x 3
    centered = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered) / k_neighbors
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    # all-coincident neighbourhoods have no preferred axis
    degenerate = w[:, -1] < 1e-12
    normals[degenerate] = (0.0, 0.0, 1.0)
    normals = _sign_fix(normals)

    mean_d = dist.mean(axis=1)
    density = 1.0 / (mean_d + 1e-6)
    density = density / max(np.median(density), 1e-12)

    height = rel[:, 2] - rel[:, 2].min()
    colors = cloud.colors.astype(np.float64) if cloud.colors is not None else np.zeros((m, 3))
    diag = np.linalg.norm(rel.max(axis=0) - rel.min(axis=0))
    xyz = rel / max(diag, 1e-8)
    feats = np.column_stack([height, normals, density, colors, xyz])
    return feats.astype(np.float32)


# ---------------------------------------------------------------- manifests

def _features_for(entry: dict, cloud: PointCloud, base: Path, k_neighbors: int):
    if entry.get("features"):
        F = read_fmat(base / entry["features"])
        if F.shape[0] != len(cloud):
            raise ValueError(f"{entry['features']}: {F.shape[0]} feature rows for {len(cloud)} points")
        return F
    return extract_features(cloud, k_neighbors)


def load_episode(manifest_path, k_neighbors: int = 16) -> Episode:
    """Load an episode manifest (JSON) and resolve its files relative to it."""
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    try:
        n_way, k_shot = int(m["n_way"]), int(m["k_shot"])
        sup_entries, q_entry = m["support"], m["query"]
    except KeyError as e:
        raise ValueError(f"{manifest_path}: missing manifest key {e}") from None
    support, masks, feats = [], [], []
    for n in range(n_way):
        clouds, ms, fs = [], [], []
        for k in range(k_shot):
            entry = sup_entries[n][k]
            cloud = load_ply(base / entry["cloud"])
            clouds.append(cloud)
            ms.append(read_labels(base / entry["labels"]))
            fs.append(_features_for(entry, cloud, base, k_neighbors))
        support.append(clouds)
        masks.append(ms)
        feats.append(fs)
    q_cloud = load_ply(base / q_entry["cloud"])
    q_gt = read_labels(base / q_entry["labels"]) if q_entry.get("labels") else None
    q_feat = _features_for(q_entry, q_cloud, base, k_neighbors)
    return Episode(n_way, k_shot, support, masks, q_cloud, q_gt, feats, q_feat,
                   class_ids=list(m.get("class_ids", range(1, n_way + 1))),
                   meta={k: v for k, v in m.items() if k not in ("support", "query")})


def save_episode(episode: Episode, out_dir, name: str = "episode") -> Path:
    """Write PLY, label and FMAT files plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    support = []
    for n in range(episode.n_way):
        shots = []
        for k in range(episode.k_shot):
            stem = f"{name}_support_{n + 1}_{k + 1}"
            write_ply(out / f"{stem}.ply", episode.support[n][k])
            write_labels(out / f"{stem}.labels", episode.support_masks[n][k])
            entry = {"cloud": f"{stem}.ply", "labels": f"{stem}.labels"}
            if episode.support_features is not None:
                write_fmat(out / f"{stem}.fmat", episode.support_features[n][k])
                entry["features"] = f"{stem}.fmat"
            shots.append(entry)
        support.append(shots)
    stem = f"{name}_query"
    write_ply(out / f"{stem}.ply", episode.query)
    query = {"cloud": f"{stem}.ply"}
    if episode.query_gt is not None:
        write_labels(out / f"{stem}.labels", episode.query_gt)
        query["labels"] = f"{stem}.labels"
    if episode.query_features is not None:
        write_fmat(out / f"{stem}.fmat", episode.query_features)
        query["features"] = f"{stem}.fmat"
    manifest = {"n_way": episode.n_way, "k_shot": episode.k_shot, "class_ids": list(episode.class_ids),
                "support": support, "query": query}
    manifest.update({k: v for k, v in episode.meta.items() if k not in manifest})
    path = out / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
