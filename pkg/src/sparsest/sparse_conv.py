"""Stride-1, same-padding 2D convolution: a naive dense oracle and a
gather-scatter sparse version that only touches active input sites."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import SparseTensor2D, StructuralError, as_dense, to_sparse


@dataclass(frozen=True, eq=False)
class ConvKernel:
    """Weights shaped ``(C_out, C_in, K, K)`` with odd ``K``; bias is optional."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise StructuralError(f"kernel must be (C_out, C_in, K, K) with odd K, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise StructuralError("kernel weights must be finite")
        object.__setattr__(self, "weights", w)
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64).reshape(w.shape[0])
            object.__setattr__(self, "bias", b)

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return self.weights.shape[2]


@dataclass
class MacCounter:
    """Accumulates multiply-accumulate operations actually executed."""

    macs: int = 0
    calls: int = 0
    per_call: list = field(default_factory=list)

    def add(self, n: int) -> None:
        self.macs += n
        self.calls += 1
        self.per_call.append(n)


def _check_channels(c_in: int, k: ConvKernel) -> None:
    if c_in != k.c_in:
        raise StructuralError(f"input has {c_in} channels, kernel expects {k.c_in}")


def dense_conv2d(x, k: ConvKernel) -> np.ndarray:
    """Reference convolution (cross-correlation) by explicit sliding window."""
    x = as_dense(x)
    _check_channels(x.shape[0], k)
    C, H, W = x.shape
    K = k.size
    r = K // 2
    xp = np.zeros((C, H + 2 * r, W + 2 * r))
    xp[:, r:r + H, r:r + W] = x
    out = np.zeros((k.c_out, H, W))
    for o in range(k.c_out):
        for u in range(H):
            for v in range(W):
                out[o, u, v] = np.sum(k.weights[o] * xp[:, u:u + K, v:v + K])
    if k.bias is not None:
        out += k.bias[:, None, None]
    return out


def sparse_conv2d(x: SparseTensor2D, k: ConvKernel, counter: MacCounter | None = None) -> SparseTensor2D:
    """Convolve only the active sites of ``x``.

    Each active site scatters ``W[:, :, i, j] @ F`` to the output location it
    reaches through offset ``(i, j)``; contributions landing in the padding
    border are computed and discarded, exactly as a padded dense pass would.
    Output sites that end up exactly zero are dropped.
    """
    _check_channels(x.channels, k)
    _, H, W = x.dims
    K = k.size
    r = K // 2
    acc = np.zeros((H + 2 * r, W + 2 * r, k.c_out))
    n = x.n_active
    if n:
        hs, ws = x.coords[:, 0], x.coords[:, 1]
        for i in range(K):
            for j in range(K):
                contrib = x.features @ k.weights[:, :, i, j].T
                # output (u, v) = (h - i + r, w - j + r); padded index adds r
                acc[hs - i + 2 * r, ws - j + 2 * r] += contrib
    if counter is not None:
        counter.add(n * K * K * k.c_in * k.c_out)
    out = acc[r:r + H, r:r + W].transpose(2, 0, 1)
    if k.bias is not None:
        out = out + k.bias[:, None, None]
    return to_sparse(out)


def count_macs_sparse(x: SparseTensor2D, k: ConvKernel) -> int:
    """Closed-form sparse cost ``D * K^2 * C_in * C_out``."""
    _check_channels(x.channels, k)
    return x.n_active * k.size ** 2 * k.c_in * k.c_out


def count_macs_dense(H: int, W: int, k: ConvKernel) -> int:
    return H * W * k.size ** 2 * k.c_in * k.c_out
