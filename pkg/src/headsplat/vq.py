"""Nearest-entry vector quantization of a feature grid against a fixed codebook."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParseError

_CBOK_MAGIC = b"CBOK"


@dataclass(frozen=True)
class Codebook:
    """Frozen table of quantization entries, (N_code, d) float32."""

    entries: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError("codebook must be a non-empty (N_code, d) array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("codebook entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class QuantizedGrid:
    """Per-cell nearest codebook entry: indices (m, n) plus entry vectors (m, n, d)."""

    indices: np.ndarray
    vectors: np.ndarray


def quantize(grid: np.ndarray, book: Codebook, chunk: int = 4096) -> QuantizedGrid:
    """Snap every grid cell to its L2-nearest codebook entry.

    Ties (e.g. duplicated entries) resolve to the lowest index.  Squared
    distances are compared directly via sum((z - c)^2), the same formulation
    an exhaustive scalar loop uses, so results are deterministic.

    Raises:
        ValueError: feature dimension mismatch.
    """
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"feature grid must be (m, n, d), got {grid.shape}")
    m, n, d = grid.shape
    if d != book.dim:
        raise ValueError(f"grid dimension {d} does not match codebook dimension {book.dim}")
    flat = grid.reshape(-1, d).astype(np.float32)
    entries = book.entries
    indices = np.empty(flat.shape[0], dtype=np.int64)
    for lo in range(0, flat.shape[0], chunk):
        hi = min(lo + chunk, flat.shape[0])
        diff = flat[lo:hi, None, :] - entries[None, :, :]
        d2 = np.einsum("ikd,ikd->ik", diff, diff)
        indices[lo:hi] = np.argmin(d2, axis=1)  # argmin keeps the lowest index on ties
    return QuantizedGrid(
        indices=indices.reshape(m, n),
        vectors=entries[indices].reshape(m, n, d).copy(),
    )


def quantization_error(grid: np.ndarray, book: Codebook) -> float:
    """Mean squared distance between cells and their chosen entries.

    Zero exactly when every cell coincides with a codebook entry.
    """
    grid = np.asarray(grid, dtype=np.float32)
    snapped = quantize(grid, book)
    diff = grid - snapped.vectors
    return float(np.mean(np.sum(diff.astype(np.float64) ** 2, axis=-1)))


def synthetic_codebook(n_code: int, dim: int, seed: int = 0) -> Codebook:
    """Fixture codebook: centroids of random Gaussian blobs (k-means-like)."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-1.0, 1.0, size=(n_code, dim))
    entries = np.empty((n_code, dim), dtype=np.float32)
    for k in range(n_code):
        cloud = centers[k] + 0.1 * rng.standard_normal((32, dim))
        entries[k] = cloud.mean(axis=0)
    return Codebook(entries=entries)


# ---------------------------------------------------------------------------
# CBOK binary: magic "CBOK" | u32 N_code | u32 d | f32 entries row-major.
# ---------------------------------------------------------------------------


def save_codebook(path, book: Codebook) -> None:
    with open(path, "wb") as fh:
        fh.write(_CBOK_MAGIC)
        fh.write(struct.pack("<II", book.size, book.dim))
        fh.write(np.ascontiguousarray(book.entries, dtype="<f4").tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CBOK_MAGIC:
        raise ParseError(f"{path}: bad magic {blob[:4]!r} (offset 0)")
    n_code, dim = struct.unpack_from("<II", blob, 4)
    expected = 12 + n_code * dim * 4
    if len(blob) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(blob)} (offset 12)")
    entries = np.frombuffer(blob, dtype="<f4", offset=12).reshape(n_code, dim)
    return Codebook(entries=entries.copy())
