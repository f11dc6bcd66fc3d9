"""Full separator: encoder, masking network with SPGM blocks, decoder."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from spgm.block import PoolingMethod, SpgmParams, spgm_block_forward
from spgm.chunking import overlap_add, segment
from spgm.layers import (ConfigError, ConvParams, InputTooShortError,
                         TransformerLayerParams, conv1d, conv_transpose1d,
                         ones_param, sinusoidal_pe, transformer_layer_forward,
                         uniform_init, zeros_param)
from spgm.tensor import (Tensor, as_tensor, index, layer_norm, linear, mul, pad,
                         prelu, relu, reshape, sigmoid, stack, tanh, transpose)


@dataclass
class ModelConfig:
    channels: int = 256
    ffn: int = 1024
    heads: int = 8
    enc_kernel: int = 16
    enc_stride: int = 8
    chunk_size: int = 250
    num_blocks: int = 4
    intra_layers: int = 8
    pooling: PoolingMethod | None = PoolingMethod.LAST_ELEMENT
    num_sources: int = 2
    sample_rate: int = 8000
    # K/2 zero frames on both ends before chunking so every real frame is
    # covered by two chunks
    boundary_pad: bool = True
    # dual-path inter-transformer layers per block; cost model only
    inter_layers: int = 0

    def __post_init__(self):
        if isinstance(self.pooling, str):
            self.pooling = None if self.pooling.lower() in ("none", "") else PoolingMethod(self.pooling.lower())
        if self.enc_kernel < self.enc_stride:
            raise ConfigError("enc_kernel must be >= enc_stride")
        if self.channels % self.heads:
            raise ConfigError("channels must be divisible by heads")
        if self.channels % 2:
            raise ConfigError("channels must be even for positional encoding")
        if self.chunk_size < 2 or self.chunk_size % 2:
            raise ConfigError("chunk_size must be even and >= 2")
        if not 1 <= self.num_sources <= 3:
            raise ConfigError("num_sources must be 1..3")
        for name in ("channels", "ffn", "heads", "enc_kernel", "enc_stride",
                     "num_blocks", "intra_layers", "sample_rate"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.inter_layers < 0:
            raise ConfigError("inter_layers must be >= 0")

    @property
    def total_intra_layers(self) -> int:
        return self.num_blocks * self.intra_layers

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pooling"] = self.pooling.value if self.pooling else "none"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class SeparatorModel:
    """Named, ordered parameter collection plus the config that shapes it."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        if config.inter_layers:
            raise ConfigError("inter-transformer layers are only modelled by the profiler")
        self.config = config
        self.params = dict(params)
        expected = [name for name, _ in _param_shapes(config)]
        if list(self.params) != expected:
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ConfigError(f"parameter names do not match config (missing={sorted(missing)[:3]}, "
                              f"extra={sorted(extra)[:3]})")
        for name, shape in _param_shapes(config):
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.params[name].shape} != {shape}")

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "SeparatorModel":
        rng = np.random.default_rng(seed)
        n, c, ks = config.channels, config.num_sources, config.enc_kernel
        p: dict[str, Tensor] = {
            "encoder.kernel": uniform_init(rng, (n, 1, ks), ks),
            "encoder.bias": zeros_param(n),
            "input_norm.gain": ones_param(n),
            "input_norm.bias": zeros_param(n),
            "bottleneck.weight": uniform_init(rng, (n, n), n),
            "bottleneck.bias": zeros_param(n),
        }
        for b in range(config.num_blocks):
            for l in range(config.intra_layers):
                layer = TransformerLayerParams.init(rng, n, config.ffn, config.heads)
                for name, t in layer.named_parameters():
                    p[f"blocks.{b}.intra.{l}.{name}"] = t
            if config.pooling is not None:
                for name, t in SpgmParams.init(rng, n, config.pooling).named_parameters():
                    p[f"blocks.{b}.spgm.{name}"] = t
        p["mask_head.prelu"] = Tensor(np.full(1, 0.25), requires_grad=True)
        p["mask_head.expand.weight"] = uniform_init(rng, (n, c * n), n)
        p["mask_head.expand.bias"] = zeros_param(c * n)
        p["mask_head.gate_tanh.weight"] = uniform_init(rng, (n, n), n)
        p["mask_head.gate_tanh.bias"] = zeros_param(n)
        p["mask_head.gate_sigmoid.weight"] = uniform_init(rng, (n, n), n)
        p["mask_head.gate_sigmoid.bias"] = zeros_param(n)
        p["decoder.kernel"] = uniform_init(rng, (n, 1, ks), n)
        p["decoder.bias"] = zeros_param(1)
        return cls(config, p)

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def encoder(self) -> ConvParams:
        return ConvParams(self.params["encoder.kernel"], self.params["encoder.bias"],
                          self.config.enc_stride)

    def decoder(self) -> ConvParams:
        return ConvParams(self.params["decoder.kernel"], self.params["decoder.bias"],
                          self.config.enc_stride)

    def layer(self, block: int, idx: int) -> TransformerLayerParams:
        prefix = f"blocks.{block}.intra.{idx}."
        kw = {f.name: self.params[prefix + f.name]
              for f in dataclasses.fields(TransformerLayerParams) if f.name != "heads"}
        return TransformerLayerParams(**kw, heads=self.config.heads)

    def spgm(self, block: int) -> SpgmParams | None:
        if self.config.pooling is None:
            return None
        prefix = f"blocks.{block}.spgm."
        return SpgmParams(self.params[prefix + "W_s"], self.params[prefix + "W_g"],
                          self.params.get(prefix + "w_att"))

    def __call__(self, mixture) -> Tensor:
        return separate_forward(self, mixture)


def _param_shapes(config: ModelConfig):
    n, f, c, ks = config.channels, config.ffn, config.num_sources, config.enc_kernel
    yield "encoder.kernel", (n, 1, ks)
    yield "encoder.bias", (n,)
    yield "input_norm.gain", (n,)
    yield "input_norm.bias", (n,)
    yield "bottleneck.weight", (n, n)
    yield "bottleneck.bias", (n,)
    layer_shapes = dict(wq=(n, n), bq=(n,), wk=(n, n), bk=(n,), wv=(n, n), bv=(n,),
                        wo=(n, n), bo=(n,), w1=(n, f), b1=(f,), w2=(f, n), b2=(n,),
                        ln1_g=(n,), ln1_b=(n,), ln2_g=(n,), ln2_b=(n,))
    for b in range(config.num_blocks):
        for l in range(config.intra_layers):
            for name, shape in layer_shapes.items():
                yield f"blocks.{b}.intra.{l}.{name}", shape
        if config.pooling is not None:
            yield f"blocks.{b}.spgm.W_s", (n, n)
            yield f"blocks.{b}.spgm.W_g", (n, n)
            if config.pooling is PoolingMethod.ATTENTIVE:
                yield f"blocks.{b}.spgm.w_att", (n,)
    yield "mask_head.prelu", (1,)
    yield "mask_head.expand.weight", (n, c * n)
    yield "mask_head.expand.bias", (c * n,)
    yield "mask_head.gate_tanh.weight", (n, n)
    yield "mask_head.gate_tanh.bias", (n,)
    yield "mask_head.gate_sigmoid.weight", (n, n)
    yield "mask_head.gate_sigmoid.bias", (n,)
    yield "decoder.kernel", (n, 1, ks)
    yield "decoder.bias", (1,)


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    return list(_param_shapes(config))


def _samples(mixture) -> Tensor:
    samples = getattr(mixture, "samples", mixture)
    x = as_tensor(samples)
    if x.ndim != 1:
        raise ValueError(f"mixture must be mono, got shape {x.shape}")
    return x


def encode(model: SeparatorModel, x: Tensor) -> Tensor:
    """Waveform ``[T]`` to nonnegative frame features ``[T', N]``."""
    cfg = model.config
    if x.shape[0] < cfg.enc_kernel:
        raise InputTooShortError(f"mixture has {x.shape[0]} samples, need >= {cfg.enc_kernel}")
    return transpose(relu(conv1d(reshape(x, (1, x.shape[0])), model.encoder())))


def estimate_masks(model: SeparatorModel, enc: Tensor) -> list[Tensor]:
    """Masking network: one nonnegative ``[T', N]`` mask per source."""
    cfg = model.config
    p = model.params
    n, k = cfg.channels, cfg.chunk_size
    frames = enc.shape[0]
    h = linear(layer_norm(enc, p["input_norm.gain"], p["input_norm.bias"]),
               p["bottleneck.weight"], p["bottleneck.bias"])
    edge = k // 2 if cfg.boundary_pad else 0
    if edge:
        h = pad(h, edge, edge)
    x, spec = segment(h, k)                                   # [K, S, N]
    pe = sinusoidal_pe(k, n)
    for b in range(cfg.num_blocks):
        xs = transpose(x, (1, 0, 2)) + pe                     # [S, K, N]
        for l in range(cfg.intra_layers):
            xs = transformer_layer_forward(xs, model.layer(b, l))
        x = transpose(xs, (1, 0, 2))
        sp = model.spgm(b)
        if sp is not None:
            x = spgm_block_forward(x, cfg.pooling, sp)
    y = linear(prelu(x, p["mask_head.prelu"]), p["mask_head.expand.weight"],
               p["mask_head.expand.bias"])                    # [K, S, C*N]
    y = overlap_add(y, spec)
    if edge:
        y = index(y, slice(edge, edge + frames))
    masks = []
    for c in range(cfg.num_sources):
        yc = index(y, (slice(None), slice(c * n, (c + 1) * n)))
        gate = (tanh(linear(yc, p["mask_head.gate_tanh.weight"], p["mask_head.gate_tanh.bias"]))
                * sigmoid(linear(yc, p["mask_head.gate_sigmoid.weight"],
                                 p["mask_head.gate_sigmoid.bias"])))
        masks.append(relu(gate))
    return masks


def decode(model: SeparatorModel, masked: Tensor, length: int) -> Tensor:
    """Masked features ``[T', N]`` to a waveform of exactly ``length`` samples."""
    wav = conv_transpose1d(transpose(masked), model.decoder())   # [1, T_out]
    wav = reshape(wav, (wav.shape[1],))
    return pad(wav, 0, length - wav.shape[0])


def separate_forward(model: SeparatorModel, mixture) -> Tensor:
    """Separate a mono mixture into ``[C, T]`` source estimates."""
    x = _samples(mixture)
    enc = encode(model, x)
    masks = estimate_masks(model, enc)
    return stack([decode(model, mul(m, enc), x.shape[0]) for m in masks])
