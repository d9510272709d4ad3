"""Dense and coordinate-format sparse spatial tensors.

A dense tensor is a plain ``float64`` array shaped ``(C, H, W)``.  The sparse
form keeps only *active sites*: spatial locations whose channel column is not
all zero.  Coordinates are stored lexicographically sorted so every dense
tensor has exactly one sparse representation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class StructuralError(ValueError):
    """Raised on shape, channel or coordinate mismatches."""


class FormatError(ValueError):
    """Raised when an on-disk file has the wrong magic, version or size."""


def as_dense(x, name: str = "tensor") -> np.ndarray:
    """Validate ``x`` as a finite ``(C, H, W)`` tensor and return it as float64."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise StructuralError(f"{name} must have shape (C, H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise StructuralError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class SparseTensor2D:
    """Coordinate matrix ``coords`` (N, 2) plus feature matrix ``features`` (N, C)."""

    dims: tuple[int, int, int]
    coords: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        C, H, W = self.dims
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        features = np.asarray(self.features, dtype=np.float64).reshape(len(coords), C)
        if len(coords):
            if (coords[:, 0].min() < 0 or coords[:, 0].max() >= H
                    or coords[:, 1].min() < 0 or coords[:, 1].max() >= W):
                raise StructuralError("sparse coordinate out of bounds")
            lin = coords[:, 0] * W + coords[:, 1]
            if np.any(np.diff(lin) <= 0):
                raise StructuralError("coordinates must be strictly sorted and unique")
        coords.flags.writeable = False
        features.flags.writeable = False
        object.__setattr__(self, "dims", (int(C), int(H), int(W)))
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", features)

    @property
    def n_active(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.dims[0]

    def __eq__(self, other):
        if not isinstance(other, SparseTensor2D):
            return NotImplemented
        return (self.dims == other.dims
                and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.features, other.features))

    __hash__ = None

    def __repr__(self):
        return f"SparseTensor2D(dims={self.dims}, n_active={self.n_active})"


def active_mask(t: np.ndarray, zero_tol: float = 0.0) -> np.ndarray:
    """Boolean ``(H, W)`` map of sites where any channel magnitude exceeds ``zero_tol``."""
    return np.any(np.abs(t) > zero_tol, axis=0)


def to_sparse(t, zero_tol: float = 0.0) -> SparseTensor2D:
    """Convert a dense ``(C, H, W)`` tensor to canonical sparse form.

    Sites are kept when any channel magnitude exceeds ``zero_tol``; the whole
    channel column of a kept site is copied, including sub-tolerance values.
    """
    if zero_tol < 0:
        raise ValueError("zero_tol must be non-negative")
    t = as_dense(t)
    hs, ws = np.nonzero(active_mask(t, zero_tol))  # row-major order is lexicographic
    coords = np.stack([hs, ws], axis=1)
    features = t[:, hs, ws].T
    return SparseTensor2D(t.shape, coords, features)


def to_dense(s: SparseTensor2D) -> np.ndarray:
    out = np.zeros(s.dims)
    if s.n_active:
        out[:, s.coords[:, 0], s.coords[:, 1]] = s.features.T
    return out


def occupancy(t) -> float:
    """Fraction of active sites (exact-zero test) in a dense or sparse tensor."""
    if isinstance(t, SparseTensor2D):
        _, H, W = t.dims
        return t.n_active / (H * W)
    t = np.asarray(t)
    H, W = t.shape[-2:]
    return int(np.count_nonzero(active_mask(t))) / (H * W)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream; identical across platforms for identical seeds."""
    return np.random.Generator(np.random.PCG64(np.uint64(seed)))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for per-sequence or per-run streams."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# --- tensor-sequence file (SSTD) -------------------------------------------

DATASET_MAGIC = b"SSTD"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sI5I")


def dataset_to_bytes(data) -> bytes:
    """Serialize an ``(S, T, C, H, W)`` array as little-endian float32."""
    arr = np.asarray(data)
    if arr.ndim != 5:
        raise StructuralError(f"dataset must be (S, T, C, H, W), got {arr.shape}")
    header = _DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def dataset_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _DATASET_HEADER.size:
        raise FormatError("truncated dataset header")
    magic, version, *dims = _DATASET_HEADER.unpack_from(buf)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    count = int(np.prod(dims))
    payload = buf[_DATASET_HEADER.size:]
    if len(payload) != 4 * count:
        raise FormatError(f"dataset payload holds {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)


def write_dataset(path, data) -> None:
    Path(path).write_bytes(dataset_to_bytes(data))


def read_dataset(path) -> np.ndarray:
    return dataset_from_bytes(Path(path).read_bytes())
