"""Closed-form parameter and multiply-accumulate counts for a ModelConfig."""
from __future__ import annotations

from spgm.block import PoolingMethod, SpgmParams
from spgm.chunking import num_chunks
from spgm.layers import TransformerLayerParams, conv_output_length
from spgm.separator import ModelConfig

MAC_CONVENTION = (
    "1 MAC per multiply-accumulate in convolutions, linear layers and attention "
    "(K^2*N per chunk for scores plus K^2*N for values); SPGM gain products counted "
    "once per path (2*K*S*N), attentive-pool scoring K*S*N; layer norm, activations, "
    "softmax, mask products and overlap-add excluded"
)


def count_params(config: ModelConfig) -> dict[str, int]:
    """Parameter count per module group plus ``total``."""
    n, f, c, ks = config.channels, config.ffn, config.num_sources, config.enc_kernel
    b = config.num_blocks
    layer = TransformerLayerParams.param_count(n, f)
    counts = {
        "encoder": n * ks + n,
        "input_norm": 2 * n,
        "bottleneck": n * n + n,
        "intra_layers": b * config.intra_layers * layer,
        "spgm_blocks": b * SpgmParams.param_count(n, config.pooling) if config.pooling else 0,
        "mask_head": 1 + (n * c * n + c * n) + 2 * (n * n + n),
        "decoder": n * ks + 1,
    }
    if config.inter_layers:
        counts["inter_layers"] = b * config.inter_layers * layer
    counts["total"] = sum(counts.values())
    return counts


def spgm_param_breakdown(config: ModelConfig) -> dict[str, int]:
    """Modulation weights vs attentive-pooling vectors across all blocks."""
    if config.pooling is None:
        return {"modulation": 0, "pooling": 0}
    n, b = config.channels, config.num_blocks
    pool = n if config.pooling is PoolingMethod.ATTENTIVE else 0
    return {"modulation": b * 2 * n * n, "pooling": b * pool}


def chunk_geometry(config: ModelConfig, duration_s: float) -> tuple[int, int, int]:
    """``(samples, encoder frames, chunks)`` for a mixture of ``duration_s``."""
    samples = int(round(duration_s * config.sample_rate))
    frames = conv_output_length(samples, config.enc_kernel, config.enc_stride)
    padded = frames + (config.chunk_size if config.boundary_pad else 0)
    return samples, frames, num_chunks(padded, config.chunk_size)


def spgm_block_macs(channels: int, chunk_size: int, chunks: int,
                    pooling: PoolingMethod) -> int:
    n, ks = channels, chunk_size * chunks
    macs = 2 * n * n + 2 * ks * n
    if pooling is PoolingMethod.ATTENTIVE:
        macs += ks * n
    return macs


def count_macs(config: ModelConfig, duration_s: float) -> dict[str, int]:
    """Analytic MAC count per module group plus ``total`` (see MAC_CONVENTION)."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    n, f, c, ks = config.channels, config.ffn, config.num_sources, config.enc_kernel
    k, b = config.chunk_size, config.num_blocks
    samples, frames, s = chunk_geometry(config, duration_s)
    if frames < 1:
        raise ValueError(f"{duration_s} s is shorter than one encoder frame")
    tokens = k * s
    per_layer = tokens * (4 * n * n + 2 * n * f) + s * 2 * k * k * n
    macs = {
        "encoder": frames * n * ks,
        "bottleneck": frames * n * n,
        "intra_layers": b * config.intra_layers * per_layer,
        "spgm_blocks": b * spgm_block_macs(n, k, s, config.pooling) if config.pooling else 0,
        "mask_head": tokens * n * c * n + c * frames * 2 * n * n,
        "decoder": c * frames * n * ks,
    }
    if config.inter_layers:
        # inter layers attend across the S chunks at each of the K positions
        macs["inter_layers"] = b * config.inter_layers * (
            tokens * (4 * n * n + 2 * n * f) + k * 2 * s * s * n)
    macs["total"] = sum(macs.values())
    return macs
