"""Convolutions, attention and the pre-norm transformer layer."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from spgm import kernels
from spgm.tensor import (Tensor, ShapeError, from_op, layer_norm, linear, matmul,
                         relu, reshape, softmax, transpose)


class ConfigError(ValueError):
    """Invalid hyperparameter combination."""


class InputTooShortError(ValueError):
    pass


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


# convolution ------------------------------------------------------------------

@dataclass
class ConvParams:
    """1-D convolution weights.

    ``kernel`` is ``[out_ch, in_ch, kernel_size]`` for :func:`conv1d`. The
    transposed convolution reuses the same array, mapping ``out_ch`` channels
    back to ``in_ch``; ``bias`` always has the length of the op's output
    channels.
    """
    kernel: Tensor
    bias: Tensor | None
    stride: int

    def __post_init__(self):
        if self.kernel.ndim != 3:
            raise ShapeError("conv kernel must be [out_ch, in_ch, kernel_size]")
        if self.kernel_size < self.stride:
            raise ConfigError("kernel_size must be >= stride for gap-free overlap-add")

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[2]


def _frames(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    """View ``x[C, T]`` as ``[T', C, size]`` frames."""
    x = np.ascontiguousarray(x)
    c, t = x.shape
    n = (t - size) // stride + 1
    sc, st = x.strides
    return np.lib.stride_tricks.as_strided(x, (n, c, size), (stride * st, sc, st),
                                           writeable=False)


def conv1d(x: Tensor, p: ConvParams) -> Tensor:
    """Valid (unpadded) strided correlation: ``[in_ch, T] -> [out_ch, T']``."""
    cout, cin, ks = p.kernel.shape
    if x.ndim != 2 or x.shape[0] != cin:
        raise ShapeError(f"conv1d expects [{cin}, T], got {x.shape}")
    t = x.shape[1]
    if t < ks:
        raise InputTooShortError(f"input length {t} shorter than kernel {ks}")
    fr = _frames(x.data, ks, p.stride)
    out = np.tensordot(p.kernel.data, fr, axes=([1, 2], [1, 2]))
    if p.bias is not None:
        out = out + p.bias.data[:, None]

    def bw(g):
        gk = np.tensordot(g, fr, axes=([1], [0]))
        cols = np.tensordot(g.T, p.kernel.data, axes=([1], [0]))  # [T', cin, ks]
        gx = kernels.scatter_frames(cols.transpose(0, 2, 1), p.stride, t).T
        grads = [gx, gk]
        if p.bias is not None:
            grads.append(g.sum(axis=1))
        return grads

    inputs = (x, p.kernel) if p.bias is None else (x, p.kernel, p.bias)
    return from_op(out, inputs, bw)


def conv_transpose1d(x: Tensor, p: ConvParams) -> Tensor:
    """Adjoint of :func:`conv1d`: ``[out_ch, T'] -> [in_ch, (T'-1)*stride + ks]``."""
    cin_t, cout_t, ks = p.kernel.shape
    if x.ndim != 2 or x.shape[0] != cin_t:
        raise ShapeError(f"conv_transpose1d expects [{cin_t}, T'], got {x.shape}")
    n = x.shape[1]
    t = (n - 1) * p.stride + ks
    cols = np.tensordot(x.data.T, p.kernel.data, axes=([1], [0]))  # [T', cout, ks]
    out = kernels.scatter_frames(cols.transpose(0, 2, 1), p.stride, t).T
    if p.bias is not None:
        out = out + p.bias.data[:, None]

    def bw(g):
        fr = _frames(g, ks, p.stride)  # [T', cout, ks]
        gx = np.tensordot(p.kernel.data, fr, axes=([1, 2], [1, 2]))
        gk = np.tensordot(x.data, fr, axes=([1], [0]))
        grads = [gx, gk]
        if p.bias is not None:
            grads.append(g.sum(axis=1))
        return grads

    inputs = (x, p.kernel) if p.bias is None else (x, p.kernel, p.bias)
    return from_op(out, inputs, bw)


def conv_output_length(t: int, kernel_size: int, stride: int) -> int:
    return (t - kernel_size) // stride + 1


# transformer ------------------------------------------------------------------

@dataclass
class TransformerLayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    heads: int = 8

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, ffn: int, heads: int):
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        n, f = channels, ffn
        return cls(
            wq=uniform_init(rng, (n, n), n), bq=zeros_param(n),
            wk=uniform_init(rng, (n, n), n), bk=zeros_param(n),
            wv=uniform_init(rng, (n, n), n), bv=zeros_param(n),
            wo=uniform_init(rng, (n, n), n), bo=zeros_param(n),
            w1=uniform_init(rng, (n, f), n), b1=zeros_param(f),
            w2=uniform_init(rng, (f, n), f), b2=zeros_param(n),
            ln1_g=ones_param(n), ln1_b=zeros_param(n),
            ln2_g=ones_param(n), ln2_b=zeros_param(n),
            heads=heads,
        )

    def named_parameters(self):
        for fld in fields(self):
            if fld.name != "heads":
                yield fld.name, getattr(self, fld.name)

    @staticmethod
    def param_count(channels: int, ffn: int) -> int:
        n, f = channels, ffn
        return 4 * (n * n + n) + n * f + f + f * n + n + 4 * n


def multi_head_attention(x: Tensor, p: TransformerLayerParams) -> Tensor:
    """Unmasked scaled dot-product self-attention over ``x[..., T, N]``.

    A leading batch axis (one entry per chunk) is optional.
    """
    n = x.shape[-1]
    h = p.heads
    if n % h:
        raise ConfigError(f"channels {n} not divisible by heads {h}")
    d = n // h
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    b, t = x.shape[0], x.shape[1]

    def split(z):
        z = transpose(reshape(z, (b, t, h, d)), (0, 2, 1, 3))
        return reshape(z, (b * h, t, d))

    q = split(linear(x, p.wq, p.bq))
    k = split(linear(x, p.wk, p.bk))
    v = split(linear(x, p.wv, p.bv))
    att = softmax(matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(d)), axis=-1)
    ctx = reshape(matmul(att, v), (b, h, t, d))
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, n))
    out = linear(ctx, p.wo, p.bo)
    return reshape(out, (t, n)) if squeeze else out


def feed_forward(x: Tensor, p: TransformerLayerParams) -> Tensor:
    return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2)


def transformer_layer_forward(x: Tensor, p: TransformerLayerParams) -> Tensor:
    # pre-norm residual: x + MHA(LN(x)), then h + FFN(LN(h))
    h = x + multi_head_attention(layer_norm(x, p.ln1_g, p.ln1_b), p)
    return h + feed_forward(layer_norm(h, p.ln2_g, p.ln2_b), p)


def pe_at(positions, channels: int) -> np.ndarray:
    """Sinusoidal encoding rows for arbitrary (possibly fractional) positions."""
    if channels % 2:
        raise ConfigError("positional encoding needs an even channel count")
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, channels, 2) / channels)
    pe = np.zeros((pos.shape[0], channels))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def sinusoidal_pe(length: int, channels: int) -> Tensor:
    return Tensor(pe_at(np.arange(length), channels), _copy=False)
