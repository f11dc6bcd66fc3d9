"""50%-overlap chunking of ``[T, N]`` feature sequences and its inverse."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spgm import kernels
from spgm.layers import ConfigError
from spgm.tensor import ShapeError, Tensor, from_op


@dataclass(frozen=True)
class ChunkSpec:
    chunk_size: int
    hop: int
    pad_len: int
    length: int  # unpadded frame count
    num_chunks: int


def num_chunks(length: int, chunk_size: int) -> int:
    hop = chunk_size // 2
    return -(-max(length - chunk_size, 0) // hop) + 1


def make_spec(length: int, chunk_size: int) -> ChunkSpec:
    if chunk_size < 2 or chunk_size % 2:
        raise ConfigError(f"chunk size must be even and >= 2, got {chunk_size}")
    hop = chunk_size // 2
    s = num_chunks(length, chunk_size)
    padded = (s - 1) * hop + chunk_size
    return ChunkSpec(chunk_size, hop, padded - length, length, s)


def _gather(x: np.ndarray, spec: ChunkSpec) -> np.ndarray:
    idx = np.arange(spec.chunk_size)[:, None] + spec.hop * np.arange(spec.num_chunks)[None, :]
    return x[idx]


def _coverage(spec: ChunkSpec) -> np.ndarray:
    ones = np.ones((spec.num_chunks, spec.chunk_size, 1))
    return kernels.scatter_frames(ones, spec.hop, spec.length + spec.pad_len)


def segment(x: Tensor, chunk_size: int) -> tuple[Tensor, ChunkSpec]:
    """Split ``x[T, N]`` into ``[K, S, N]`` chunks hopping by ``K/2``.

    The tail is zero-padded so the last chunk is full.
    """
    if x.ndim != 2:
        raise ShapeError(f"segment expects [T, N], got {x.shape}")
    spec = make_spec(x.shape[0], chunk_size)
    xp = np.pad(x.data, ((0, spec.pad_len), (0, 0)))
    out = _gather(xp, spec)

    def bw(g):
        summed = kernels.scatter_frames(g.transpose(1, 0, 2), spec.hop,
                                        spec.length + spec.pad_len)
        return (summed[:spec.length],)

    return from_op(out, (x,), bw), spec


def overlap_add(c: Tensor, spec: ChunkSpec) -> Tensor:
    """Invert :func:`segment`: sum chunks at their offsets, divide by coverage, trim."""
    if c.ndim != 3 or c.shape[:2] != (spec.chunk_size, spec.num_chunks):
        raise ShapeError(f"chunks {c.shape} do not match {spec}")
    total = spec.length + spec.pad_len
    cover = _coverage(spec)
    out = kernels.scatter_frames(c.data.transpose(1, 0, 2), spec.hop, total) / cover

    def bw(g):
        gp = np.zeros((total, g.shape[1]))
        gp[:spec.length] = g
        return (_gather(gp / cover, spec),)

    return from_op(out[:spec.length], (c,), bw)
