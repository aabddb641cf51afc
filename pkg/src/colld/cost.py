"""Closed-form parameter and multiply-accumulate counts for the encoder."""
from __future__ import annotations

from .encoder import EncoderConfig
from .exceptions import UsageError

FRAME_RATE_HZ = 50


def block_param_count(config: EncoderConfig) -> int:
    d, f, k = config.dim, config.ffn, config.conv_kernel
    ffn = 2 * d + d * f + f + f * d + d
    attn = 2 * d + 4 * (d * d + d)
    conv = 2 * d + (d * 2 * d + 2 * d) + (k * d + d) + 2 * d + (d * d + d)
    final_norm = 2 * d
    return 2 * ffn + attn + conv + final_norm


def param_count(config: EncoderConfig) -> int:
    """Input projection + mask embedding + ``layers`` identical blocks."""
    d = config.dim
    return config.input_dim * d + d + d + config.layers * block_param_count(config)


def block_macs(config: EncoderConfig, frames: int) -> int:
    d, f, k, t = config.dim, config.ffn, config.conv_kernel, frames
    ffn = 2 * (t * d * f + t * f * d)
    attn_proj = 4 * t * d * d
    attn_core = 2 * t * t * d  # scores QK^T and context AV, summed over heads
    conv = t * d * 2 * d + t * k * d + t * d * d
    return ffn + attn_proj + attn_core + conv


def estimate_macs(config: EncoderConfig, seconds: float, frame_rate: int = FRAME_RATE_HZ) -> int:
    """Forward-pass MACs for an utterance of ``seconds`` at the post-stacking frame rate.

    One MAC per multiply-add in affine maps, attention products and
    convolutions; normalization and activations are free.
    """
    if seconds <= 0:
        raise UsageError(f"seconds must be positive, got {seconds}")
    t = int(round(seconds * frame_rate))
    return t * config.input_dim * config.dim + config.layers * block_macs(config, t)
