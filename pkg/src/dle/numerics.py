"""Dense linear algebra and similarity primitives.

Matrices are plain ``numpy`` arrays stored as float32. Reductions are
accumulated in float64 and cast back.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

EPS = 1e-8
RNG_ALGORITHM = "pcg64"

FMAT_MAGIC = b"FMAT"
_FMAT_HEADER = struct.Struct("<4sIII")


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float32 array."""
    m = np.asarray(x, dtype=np.float32)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def make_rng(seed: int, algorithm: str = RNG_ALGORITHM) -> np.random.Generator:
    """Seeded generator. Same seed and algorithm give the same stream everywhere."""
    if algorithm != RNG_ALGORITHM:
        raise ValueError(f"unsupported rng algorithm {algorithm!r}")
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.PCG64(seed))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.size == 0:
        raise ValueError("vectors must have at least one component")
    denom = max(np.linalg.norm(a) * np.linalg.norm(b), EPS)
    return float(np.clip(a @ b / denom, -1.0, 1.0))


def pairwise_cosine(A, B) -> np.ndarray:
    """Cosine similarity between every row of ``A`` and every row of ``B``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape} vs {B.shape}")
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    denom = np.maximum(np.outer(na, nb), EPS)
    return np.clip((A @ B.T) / denom, -1.0, 1.0).astype(np.float32)


def softmax_rows(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        return M.astype(np.float32)
    z = M - M.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def linear_map(X, W, bias=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[0]:
        raise ValueError(f"shape mismatch: X {X.shape} @ W {W.shape}")
    out = X @ W
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64).ravel()
        if bias.shape[0] != W.shape[1]:
            raise ValueError(f"bias length {bias.shape[0]} != {W.shape[1]}")
        out = out + bias
    return out.astype(np.float32)


def seeded_gaussian(rows: int, cols: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    return (rng.standard_normal((rows, cols)) * scale).astype(np.float32)


def write_fmat(path, M) -> None:
    M = as_matrix(M)
    rows, cols = M.shape
    with open(path, "wb") as f:
        f.write(_FMAT_HEADER.pack(FMAT_MAGIC, rows, cols, 0))
        f.write(M.astype("<f4").tobytes(order="C"))


def read_fmat(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FMAT_HEADER.size:
        raise ValueError(f"{path}: file shorter than FMAT header")
    magic, rows, cols, reserved = _FMAT_HEADER.unpack_from(raw)
    if magic != FMAT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if reserved != 0:
        raise ValueError(f"{path}: reserved header field must be 0")
    body = raw[_FMAT_HEADER.size:]
    if len(body) != rows * cols * 4:
        raise ValueError(f"{path}: expected {rows * cols * 4} data bytes, got {len(body)}")
    M = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)
    return as_matrix(M, name=str(path))
