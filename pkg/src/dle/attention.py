"""Single-head cross-attention, residual feed-forward block, masked variant."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import as_matrix, linear_map, read_fmat, seeded_gaussian, softmax_rows, write_fmat

MASK_VALUE = -1e9


@dataclass(frozen=True)
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        if self.w_q.shape != self.w_k.shape:
            raise ValueError(f"W_Q {self.w_q.shape} and W_K {self.w_k.shape} differ")
        if self.w_q.shape[0] != self.w_v.shape[0]:
            raise ValueError("W_Q and W_V must share the input dimension")

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_v(self) -> int:
        return self.w_v.shape[1]

    @classmethod
    def identity(cls, d: int, gain: float = 1.0, feature_scale: float | None = None) -> "AttentionParams":
        """Identity projections. With ``feature_scale`` (typical squared row norm)
        the query and key maps are scaled so scores equal
        ``gain * <q, k> / feature_scale``; untrained attention is otherwise
        close to uniform on unit-scale features."""
        eye = np.eye(d, dtype=np.float32)
        if feature_scale is None:
            return cls(eye, eye, eye)
        g = np.float32(np.sqrt(gain * np.sqrt(d) / max(feature_scale, 1e-12)))
        return cls(eye * g, eye * g, eye)

    @classmethod
    def random(cls, d: int, rng: np.random.Generator) -> "AttentionParams":
        s = 1.0 / np.sqrt(d)
        return cls(*(seeded_gaussian(d, d, s, rng) for _ in range(3)))


@dataclass(frozen=True)
class FFNParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w1", as_matrix(self.w1, "w1"))
        object.__setattr__(self, "w2", as_matrix(self.w2, "w2"))
        object.__setattr__(self, "b1", np.asarray(self.b1, dtype=np.float32).ravel())
        object.__setattr__(self, "b2", np.asarray(self.b2, dtype=np.float32).ravel())
        d_in, d_h = self.w1.shape
        if self.b1.shape != (d_h,) or self.w2.shape[0] != d_h or self.b2.shape != (self.w2.shape[1],):
            raise ValueError("inconsistent FFN parameter shapes")
        if self.w2.shape[1] != d_in:
            raise ValueError("FFN output width must equal its input width for the residual")

    @classmethod
    def zeros(cls, d: int, hidden: int | None = None) -> "FFNParams":
        h = 2 * d if hidden is None else hidden
        return cls(np.zeros((d, h)), np.zeros(h), np.zeros((h, d)), np.zeros(d))

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, hidden: int | None = None) -> "FFNParams":
        h = 2 * d if hidden is None else hidden
        return cls(seeded_gaussian(d, h, 1.0 / np.sqrt(d), rng), np.zeros(h),
                   seeded_gaussian(h, d, 1.0 / np.sqrt(h), rng), np.zeros(d))


def attention_weights(queries, context, params: AttentionParams, allowed=None) -> np.ndarray:
    """Softmax of scaled dot-product scores, optionally masked."""
    queries = as_matrix(queries, "queries")
    context = as_matrix(context, "context")
    if queries.shape[1] != params.w_q.shape[0] or context.shape[1] != params.w_k.shape[0]:
        raise ValueError(f"feature width mismatch: queries {queries.shape}, context {context.shape}, "
                         f"params expect {params.w_q.shape[0]}")
    if context.shape[0] < 1:
        raise ValueError("context must have at least one row")
    q = linear_map(queries, params.w_q).astype(np.float64)
    k = linear_map(context, params.w_k).astype(np.float64)
    beta = q @ k.T / np.sqrt(params.d_k)
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool).ravel()
        if allowed.shape[0] != context.shape[0]:
            raise ValueError("allowed mask length must match context rows")
        if not allowed.any():
            raise ValueError("masked attention needs at least one allowed position")
        beta[:, ~allowed] = MASK_VALUE
    return softmax_rows(beta)


def cross_attention(queries, context, params: AttentionParams) -> np.ndarray:
    w = attention_weights(queries, context, params)
    v = linear_map(context, params.w_v).astype(np.float64)
    return (w.astype(np.float64) @ v).astype(np.float32)


def masked_cross_attention(queries, context, allowed, params: AttentionParams) -> np.ndarray:
    w = attention_weights(queries, context, params, allowed=allowed)
    v = linear_map(context, params.w_v).astype(np.float64)
    return (w.astype(np.float64) @ v).astype(np.float32)


def ffn(X, params: FFNParams) -> np.ndarray:
    X = as_matrix(X, "X")
    if X.shape[1] != params.w1.shape[0]:
        raise ValueError(f"FFN expects width {params.w1.shape[0]}, got {X.shape[1]}")
    h = np.maximum(linear_map(X, params.w1, params.b1), 0.0)
    return (X.astype(np.float64) + linear_map(h, params.w2, params.b2)).astype(np.float32)


def save_params(directory, tensors: dict) -> Path:
    """Write each named matrix as FMAT plus a JSON manifest mapping names to files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, value in sorted(tensors.items()):
        fname = f"{name}.fmat"
        write_fmat(directory / fname, np.atleast_2d(value))
        manifest[name] = fname
    path = directory / "params.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_params(manifest_path) -> dict:
    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text())
    if not isinstance(entries, dict):
        raise ValueError(f"{manifest_path}: manifest must map names to FMAT files")
    return {name: read_fmat(manifest_path.parent / fname) for name, fname in entries.items()}


def attention_from_tensors(tensors: dict, prefix: str) -> AttentionParams:
    return AttentionParams(tensors[f"{prefix}.w_q"], tensors[f"{prefix}.w_k"], tensors[f"{prefix}.w_v"])


def ffn_from_tensors(tensors: dict, prefix: str) -> FFNParams:
    return FFNParams(tensors[f"{prefix}.w1"], tensors[f"{prefix}.b1"],
                     tensors[f"{prefix}.w2"], tensors[f"{prefix}.b2"])
