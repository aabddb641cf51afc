"""Conformer encoder with per-block tap points.

Block layout, every sublayer pre-normed with a residual connection::

    x = x + 0.5 * FFN1(LN(x))
    x = x + MHSA(LN(x))
    x = x + Conv(LN(x))        # pointwise -> GLU -> depthwise -> LN -> swish -> pointwise
    x = x + 0.5 * FFN2(LN(x))  # "ffn2" tap: the scaled FFN2 output, before the residual add
    x = LN(x)                  # "block_output" tap
"""
from __future__ import annotations

import math
import zlib
from collections.abc import MutableMapping
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from .autodiff import Tensor, ops
from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import ConfigurationError, UsageError

TAP_KINDS = ("ffn2", "block_output")
_NEG_INF = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    dim: int
    ffn: int
    heads: int
    conv_kernel: int = 31
    input_dim: int = 160
    preset_name: str | None = None

    def __post_init__(self):
        for key in ("layers", "dim", "ffn", "heads", "conv_kernel", "input_dim"):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{key} must be a positive integer, got {value!r}", key=key)
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} is not divisible by heads {self.heads}", key="heads")
        if self.conv_kernel % 2 == 0:
            raise ConfigurationError(f"conv_kernel must be odd, got {self.conv_kernel}", key="conv_kernel")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown encoder config keys {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "xx-large": EncoderConfig(layers=40, dim=1024, ffn=4096, heads=16, preset_name="xx-large"),
    "x-large": EncoderConfig(layers=24, dim=1024, ffn=4096, heads=16, preset_name="x-large"),
    "large12": EncoderConfig(layers=12, dim=1024, ffn=4096, heads=16, preset_name="large12"),
    "large40": EncoderConfig(layers=40, dim=768, ffn=1024, heads=8, preset_name="large40"),
    "tiny": EncoderConfig(layers=4, dim=32, ffn=64, heads=2, conv_kernel=15, preset_name="tiny"),
}


def preset(name: str, **overrides) -> EncoderConfig:
    try:
        base = PRESETS[name.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", key="preset") from None
    return replace(base, **overrides) if overrides else base


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f, k = config.dim, config.ffn, config.conv_kernel
    shapes: dict[str, tuple[int, ...]] = {
        "input.weight": (config.input_dim, d),
        "input.bias": (d,),
        "mask_embedding": (d,),
    }
    for i in range(1, config.layers + 1):
        p = f"blocks.{i}."
        for ffn in ("ffn1", "ffn2"):
            shapes.update({
                p + ffn + ".norm.gamma": (d,), p + ffn + ".norm.beta": (d,),
                p + ffn + ".w1": (d, f), p + ffn + ".b1": (f,),
                p + ffn + ".w2": (f, d), p + ffn + ".b2": (d,),
            })
            if ffn == "ffn1":
                shapes.update({p + "attn.norm.gamma": (d,), p + "attn.norm.beta": (d,)})
                for proj in ("q", "k", "v", "o"):
                    shapes.update({p + f"attn.w{proj}": (d, d), p + f"attn.b{proj}": (d,)})
                shapes.update({
                    p + "conv.norm.gamma": (d,), p + "conv.norm.beta": (d,),
                    p + "conv.pw1.weight": (d, 2 * d), p + "conv.pw1.bias": (2 * d,),
                    p + "conv.dw.weight": (k, d), p + "conv.dw.bias": (d,),
                    p + "conv.dw_norm.gamma": (d,), p + "conv.dw_norm.beta": (d,),
                    p + "conv.pw2.weight": (d, d), p + "conv.pw2.bias": (d,),
                })
        shapes.update({p + "final_norm.gamma": (d,), p + "final_norm.beta": (d,)})
    # keep each block's parameters in sublayer order
    order = ["input.weight", "input.bias", "mask_embedding"]
    for i in range(1, config.layers + 1):
        p = f"blocks.{i}."
        order += [n for n in shapes if n.startswith(p + "ffn1.")]
        order += [n for n in shapes if n.startswith(p + "attn.")]
        order += [n for n in shapes if n.startswith(p + "conv.")]
        order += [n for n in shapes if n.startswith(p + "ffn2.")]
        order += [p + "final_norm.gamma", p + "final_norm.beta"]
    return {n: shapes[n] for n in order}


def init_param(name: str, shape: tuple[int, ...], seed: int, dtype=np.float32) -> np.ndarray:
    """Uniform fan-in init for weights, zeros for biases/shifts, ones for gains.

    Each tensor has its own stream keyed by (seed, name), so values do not
    depend on which other tensors exist or on materialization order.
    """
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape, dtype=dtype)
    if leaf.startswith("b") and len(shape) == 1:  # bias, beta, b1, bq, ...
        return np.zeros(shape, dtype=dtype)
    rng = np.random.default_rng([int(seed), zlib.crc32(name.encode())])
    # weights are (fan_in, fan_out); depthwise kernels (K, C) have fan-in K
    bound = 1.0 / math.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParameterStore(MutableMapping):
    """Name -> array mapping that creates each tensor from its seed on first access."""

    def __init__(self, shapes: Mapping[str, tuple[int, ...]], seed: int, dtype=np.float32):
        self.shapes = dict(shapes)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._values: dict[str, np.ndarray] = {}

    def __getitem__(self, name):
        if name not in self._values:
            if name not in self.shapes:
                raise KeyError(name)
            self._values[name] = init_param(name, self.shapes[name], self.seed, self.dtype)
        return self._values[name]

    def __setitem__(self, name, value):
        if name not in self.shapes:
            raise KeyError(f"unknown parameter {name!r}")
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != tuple(self.shapes[name]):
            raise ConfigurationError(f"{name}: shape {value.shape} != {self.shapes[name]}")
        self._values[name] = value

    def __delitem__(self, name):
        raise TypeError("parameters cannot be removed")

    def __iter__(self):
        return iter(self.shapes)

    def __len__(self):
        return len(self.shapes)

    @property
    def materialized(self) -> int:
        return len(self._values)


@dataclass(eq=False)
class Encoder:
    config: EncoderConfig
    params: ParameterStore
    seed: int = 0

    @property
    def dtype(self):
        return self.params.dtype

    def num_parameters(self) -> int:
        return int(sum(math.prod(s) for s in self.params.shapes.values()))

    def copy(self) -> "Encoder":
        store = ParameterStore(self.params.shapes, self.params.seed, self.params.dtype)
        for name in self.params:
            store[name] = self.params[name].copy()
        return Encoder(self.config, store, self.seed)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: self.params[name] for name in self.params}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(self.params[n])) for n in self.params)


def build_encoder(config: EncoderConfig, seed: int = 0, dtype=np.float32) -> Encoder:
    if not isinstance(config, EncoderConfig):
        raise ConfigurationError(f"expected EncoderConfig, got {type(config).__name__}")
    return Encoder(config, ParameterStore(param_shapes(config), seed, dtype), seed)


@dataclass
class TapSet:
    """Representations captured at selected (1-based) layers, each frames x dim."""

    tap_kind: str
    reps: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def layers(self) -> list[int]:
        return sorted(self.reps)

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.reps[layer]

    def __len__(self) -> int:
        return len(self.reps)


def sinusoidal_positions(frames: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(frames)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ops.add(ops.matmul(x, w), b)


def _norm(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    return ops.layer_norm(x, p[prefix + ".gamma"], p[prefix + ".beta"])


def feed_forward(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Half-step FFN output, 0.5 * W2 swish(W1 LN(x)), without the residual."""
    y = _norm(x, p, prefix + ".norm")
    y = ops.swish(_linear(y, p[prefix + ".w1"], p[prefix + ".b1"]))
    y = _linear(y, p[prefix + ".w2"], p[prefix + ".b2"])
    return ops.scale(y, 0.5)


def self_attention(y: Tensor, p: Mapping[str, Tensor], prefix: str, heads: int,
                   key_bias: np.ndarray | None = None) -> Tensor:
    """Bidirectional multi-head attention over (B, T, D) input that is already normed."""
    b, t, d = y.shape
    dh = d // heads
    q = _linear(y, p[prefix + ".wq"], p[prefix + ".bq"]).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
    k = _linear(y, p[prefix + ".wk"], p[prefix + ".bk"]).reshape(b, t, heads, dh).transpose(0, 2, 3, 1)
    v = _linear(y, p[prefix + ".wv"], p[prefix + ".bv"]).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
    scores = ops.scale(ops.matmul(q, k), 1.0 / math.sqrt(dh))
    if key_bias is not None:
        scores = ops.add(scores, key_bias)
    context = ops.matmul(ops.softmax(scores, axis=-1), v)
    context = context.transpose(0, 2, 1, 3).reshape(b, t, d)
    return _linear(context, p[prefix + ".wo"], p[prefix + ".bo"])


def conv_module(y: Tensor, p: Mapping[str, Tensor], prefix: str, valid: np.ndarray | None = None) -> Tensor:
    y = ops.glu(_linear(y, p[prefix + ".pw1.weight"], p[prefix + ".pw1.bias"]), axis=-1)
    if valid is not None:
        # padding frames must not leak into real frames through the kernel
        y = ops.mul(y, valid)
    y = ops.depthwise_conv1d(y, p[prefix + ".dw.weight"], p[prefix + ".dw.bias"])
    y = ops.swish(_norm(y, p, prefix + ".dw_norm"))
    return _linear(y, p[prefix + ".pw2.weight"], p[prefix + ".pw2.bias"])


def conformer_block(x: Tensor, p: Mapping[str, Tensor], index: int, heads: int,
                    key_bias=None, valid=None) -> tuple[Tensor, Tensor]:
    """One block; returns (block output, scaled second-FFN output)."""
    pre = f"blocks.{index}."
    x = ops.add(x, feed_forward(x, p, pre + "ffn1"))
    x = ops.add(x, self_attention(_norm(x, p, pre + "attn.norm"), p, pre + "attn", heads, key_bias))
    x = ops.add(x, conv_module(_norm(x, p, pre + "conv.norm"), p, pre + "conv", valid))
    ffn2 = feed_forward(x, p, pre + "ffn2")
    x = ops.add(x, ffn2)
    return _norm(x, p, pre + "final_norm"), ffn2


def param_tensors(encoder: Encoder, requires_grad: bool, names: Iterable[str] | None = None) -> dict[str, Tensor]:
    names = encoder.params if names is None else names
    return {n: Tensor(encoder.params[n], requires_grad=requires_grad, name=n) for n in names}


def _block_param_names(config: EncoderConfig, upto: int) -> list[str]:
    keep = ("input.", "mask_embedding")
    names = [n for n in param_shapes(config) if n.startswith(keep)]
    for i in range(1, upto + 1):
        names += [n for n in param_shapes(config) if n.startswith(f"blocks.{i}.")]
    return names


def encode(
    encoder: Encoder,
    features: np.ndarray,
    lengths: np.ndarray | None = None,
    masked: np.ndarray | None = None,
    tap_layers: Iterable[int] | None = None,
    tap_kind: str = "ffn2",
    params: Mapping[str, Tensor] | None = None,
) -> tuple[dict[int, Tensor], Tensor]:
    """Batched forward pass on (B, T, input_dim) features.

    ``lengths`` marks real frames per utterance; the rest are padding and are
    excluded from attention keys and zeroed before the depthwise convolution.
    ``masked`` is a (B, T) boolean array of frames whose projected vectors are
    replaced by the mask embedding. Returns ({layer: tap}, last computed block
    output); layers above the highest tap are skipped.
    """
    cfg = encoder.config
    if tap_kind not in TAP_KINDS:
        raise UsageError(f"tap_kind must be one of {TAP_KINDS}, got {tap_kind!r}")
    features = np.asarray(features, dtype=encoder.dtype)
    if features.ndim != 3 or features.shape[-1] != cfg.input_dim:
        raise ConfigurationError(f"features must be (B, T, {cfg.input_dim}), got {features.shape}")
    taps = sorted(set(range(1, cfg.layers + 1) if tap_layers is None else tap_layers))
    for layer in taps:
        if not 1 <= layer <= cfg.layers:
            raise UsageError(f"tap layer {layer} outside [1, {cfg.layers}]")
    depth = taps[-1] if taps else cfg.layers
    if params is None:
        params = param_tensors(encoder, requires_grad=False, names=_block_param_names(cfg, depth))

    bsz, t, _ = features.shape
    dtype = encoder.dtype
    if lengths is None:
        lengths = np.full(bsz, t)
    valid = np.arange(t)[None, :] < np.asarray(lengths)[:, None]
    padded = not valid.all()
    key_bias = np.where(valid, 0.0, _NEG_INF).astype(dtype)[:, None, None, :] if padded else None
    valid_f = valid[..., None].astype(dtype) if padded else None

    x = _linear(Tensor(features), params["input.weight"], params["input.bias"])
    if masked is not None and np.any(masked):
        m = np.asarray(masked, dtype=dtype)[..., None]
        x = ops.add(ops.mul(x, 1.0 - m), ops.mul(m, params["mask_embedding"]))
    x = ops.add(x, sinusoidal_positions(t, cfg.dim, dtype))

    out: dict[int, Tensor] = {}
    for i in range(1, depth + 1):
        x, ffn2 = conformer_block(x, params, i, cfg.heads, key_bias, valid_f)
        if i in taps:
            out[i] = ffn2 if tap_kind == "ffn2" else x
    return out, x


def forward_with_taps(encoder: Encoder, features, mask=None, tap_layers=None, tap_kind: str = "ffn2") -> TapSet:
    """Frozen forward pass over one utterance; taps come back as (frames, dim) arrays.

    ``mask`` is a :class:`~colld.masking.MaskSpec` or ``None`` (teacher calls are unmasked).
    """
    from .features import FeatureSequence

    values = features.values if isinstance(features, FeatureSequence) else np.asarray(features)
    masked = None
    if mask is not None:
        if mask.frame_count != values.shape[0]:
            raise UsageError(f"mask covers {mask.frame_count} frames, input has {values.shape[0]}")
        masked = mask.as_bool()[None, :]
    taps, _ = encode(encoder, values[None], masked=masked, tap_layers=tap_layers, tap_kind=tap_kind)
    return TapSet(tap_kind, {layer: t.data[0] for layer, t in taps.items()})


def save_encoder(path, encoder: Encoder, step: int = 0, extra: Mapping | None = None) -> None:
    header = {"kind": "encoder", "config": encoder.config.to_dict(), "seed": encoder.seed, "step": int(step)}
    if extra:
        header.update(extra)
    save_checkpoint(path, encoder.state_dict(), header)


def encoder_from_state(config: EncoderConfig, tensors: Mapping[str, np.ndarray], seed: int = 0,
                       prefix: str = "") -> Encoder:
    enc = build_encoder(config, seed)
    for name in enc.params:
        key = prefix + name
        if key not in tensors:
            raise ConfigurationError(f"checkpoint lacks parameter {key!r}")
        enc.params[name] = tensors[key]
    return enc


def load_encoder(path) -> tuple[Encoder, dict]:
    header, tensors = load_checkpoint(path)
    config = EncoderConfig.from_dict(header["config"])
    return encoder_from_state(config, tensors, header.get("seed", 0)), header
