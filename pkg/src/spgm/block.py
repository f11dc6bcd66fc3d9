"""Global pooling and modulation block.

A chunked feature tensor ``[K, S, N]`` is reduced to one vector per chunk
(last-element selection or attentive pooling), averaged over chunks into a
single global vector, and fed back as a time-independent per-channel gain
``sigmoid(W_s e) + W_g e``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from spgm.layers import ConfigError, uniform_init
from spgm.tensor import (Tensor, ShapeError, index, matmul, mean, reshape, sigmoid,
                         softmax, transpose)


class PoolingMethod(str, enum.Enum):
    LAST_ELEMENT = "le"
    ATTENTIVE = "ap"


@dataclass
class SpgmParams:
    W_s: Tensor
    W_g: Tensor
    w_att: Tensor | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, method: PoolingMethod):
        n = channels
        w_att = uniform_init(rng, (n,), n) if method is PoolingMethod.ATTENTIVE else None
        return cls(uniform_init(rng, (n, n), n), uniform_init(rng, (n, n), n), w_att)

    def named_parameters(self):
        yield "W_s", self.W_s
        yield "W_g", self.W_g
        if self.w_att is not None:
            yield "w_att", self.w_att

    @staticmethod
    def param_count(channels: int, method: PoolingMethod) -> int:
        extra = channels if method is PoolingMethod.ATTENTIVE else 0
        return 2 * channels * channels + extra


def chunk_pool_le(x: Tensor) -> Tensor:
    """Last frame of every chunk: ``[K, S, N] -> [S, N]``."""
    return index(x, x.shape[0] - 1)


def chunk_pool_ap(x: Tensor, w_att: Tensor) -> Tensor:
    """Softmax-weighted average of each chunk's frames, scored by ``w_att``."""
    k, s, n = x.shape
    xs = transpose(x, (1, 0, 2))                              # [S, K, N]
    scores = reshape(matmul(xs, reshape(w_att, (n, 1))), (s, 1, k))
    weights = softmax(scores, axis=-1)
    return reshape(matmul(weights, xs), (s, n))


def attention_weights(x: Tensor, w_att: Tensor) -> np.ndarray:
    """AP weights ``[K, S]`` (for inspection; not on the tape)."""
    e = np.einsum("ksn,n->ks", x.data, w_att.data)
    e = np.exp(e - e.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def inter_pool(c: Tensor) -> Tensor:
    """Per-channel mean over chunks: ``[S, N] -> [N]``."""
    return mean(c, axis=0)


def modulation_gain(x_emb: Tensor, p: SpgmParams) -> Tensor:
    n = x_emb.shape[0]
    col = reshape(x_emb, (n, 1))
    return reshape(sigmoid(matmul(p.W_s, col)) + matmul(p.W_g, col), (n,))


def modulate(x_f: Tensor, x_emb: Tensor, p: SpgmParams) -> Tensor:
    if x_emb.shape != (x_f.shape[-1],) or p.W_s.shape != (x_emb.shape[0],) * 2:
        raise ShapeError(f"inconsistent shapes x_f={x_f.shape} x_emb={x_emb.shape}")
    return x_f * modulation_gain(x_emb, p)


def chunk_pool(x: Tensor, method: PoolingMethod, p: SpgmParams) -> Tensor:
    if method is PoolingMethod.LAST_ELEMENT:
        return chunk_pool_le(x)
    if p.w_att is None:
        raise ConfigError("attentive pooling needs w_att")
    return chunk_pool_ap(x, p.w_att)


def spgm_block_forward(x_f: Tensor, method: PoolingMethod, p: SpgmParams) -> Tensor:
    return modulate(x_f, inter_pool(chunk_pool(x_f, method, p)), p)
