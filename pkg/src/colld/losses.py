"""Distillation objectives: masked L2 regression and masked contrastive (InfoNCE)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .exceptions import ConfigurationError, UsageError
from .mapping import LayerMap
from .masking import MaskSpec

LOSS_KINDS = ("contrastive", "l2")
PROJECTIONS = ("linear_per_layer", "none")
EMPTY_MASK_POLICIES = ("skip", "redraw")


@dataclass
class DistillConfig:
    """Every knob of one distillation run."""

    loss_kind: str = "contrastive"
    temperature: float = 0.1
    num_distractors: int = 100
    tap_kind: str = "ffn2"
    target_instance_norm: bool = False
    projection: str = "linear_per_layer"
    normalized: bool = True
    mask_prob: float = 0.065
    mask_span: int = 10
    empty_mask: str = "skip"
    # optimizer and schedule
    peak_lr: float = 1e-4
    warmup_steps: int = 4000
    total_steps: int = 200000
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-6
    weight_decay: float = 1e-2
    clip_norm: float | None = 10.0
    # loop
    batch_size: int = 4
    collapse_every: int = 1
    checkpoint_every: int = 500
    log_wallclock: bool = True
    deterministic: bool = True
    init_from_teacher: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(key, msg):
            raise ConfigurationError(msg, key=key)

        if self.loss_kind not in LOSS_KINDS:
            bad("loss_kind", f"loss_kind must be one of {LOSS_KINDS}")
        if not self.temperature > 0:
            bad("temperature", "temperature must be > 0")
        if self.num_distractors < 0:
            bad("num_distractors", "num_distractors must be >= 0")
        if self.tap_kind not in ("ffn2", "block_output"):
            bad("tap_kind", "tap_kind must be 'ffn2' or 'block_output'")
        if self.projection not in PROJECTIONS:
            bad("projection", f"projection must be one of {PROJECTIONS}")
        if not 0.0 <= self.mask_prob <= 1.0:
            bad("mask_prob", "mask_prob must lie in [0, 1]")
        if self.mask_span < 1:
            bad("mask_span", "mask_span must be >= 1")
        if self.empty_mask not in EMPTY_MASK_POLICIES:
            bad("empty_mask", f"empty_mask must be one of {EMPTY_MASK_POLICIES}")
        if not self.peak_lr > 0:
            bad("peak_lr", "peak_lr must be > 0")
        if not 0 < self.warmup_steps <= self.total_steps:
            bad("warmup_steps", "need 0 < warmup_steps <= total_steps")
        if self.batch_size < 1:
            bad("batch_size", "batch_size must be >= 1")
        if self.collapse_every < 1:
            bad("collapse_every", "collapse_every must be >= 1")
        if self.checkpoint_every < 0:
            bad("checkpoint_every", "checkpoint_every must be >= 0")
        if self.init_from_teacher not in (None, "layer_skipping", "bottom_layers"):
            bad("init_from_teacher", "init_from_teacher must be null, 'layer_skipping' or 'bottom_layers'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown distill keys {unknown}", key=unknown[0])
        return cls(**d)


def sample_distractors(mask: MaskSpec, t: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``min(k, |T| - 1)`` masked frame indices other than ``t``, uniformly without replacement."""
    if t not in mask:
        raise UsageError(f"frame {t} is not masked")
    pool = mask.masked[mask.masked != t]
    n = min(int(k), pool.size)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng.choice(pool, size=n, replace=False))


def candidate_matrix(n_masked: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """(n, 1 + k_eff) positions into the masked set; column 0 is the positive.

    Row i holds i followed by ``k_eff = min(k, n - 1)`` distinct other positions,
    drawn uniformly without replacement.
    """
    k_eff = min(int(k), n_masked - 1)
    own = np.arange(n_masked)[:, None]
    if k_eff <= 0:
        return own
    keys = rng.random((n_masked, n_masked))
    keys[np.arange(n_masked), np.arange(n_masked)] = np.inf
    others = np.argpartition(keys, k_eff - 1, axis=1)[:, :k_eff] if k_eff < n_masked - 1 else \
        np.argsort(keys, axis=1)[:, :k_eff]
    return np.concatenate([own, others], axis=1)


def contrastive_layer_loss(z, h, mask: MaskSpec, k: int, tau: float, rng: np.random.Generator,
                           normalized: bool = True, candidates: np.ndarray | None = None) -> Tensor:
    """InfoNCE over masked frames: pick ``h_t`` for ``z_t`` out of itself plus ``k`` masked distractors.

    Summed over masked frames, or averaged when ``normalized``. ``h`` is a
    frozen target; ``z`` may carry gradients.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    h = h if isinstance(h, Tensor) else Tensor(h)
    if z.shape != h.shape:
        raise ConfigurationError(f"student {z.shape} and teacher {h.shape} representations differ in shape")
    if not tau > 0:
        raise ConfigurationError(f"temperature must be > 0, got {tau}")
    n = len(mask)
    if n == 0:
        return Tensor(np.zeros((), dtype=z.dtype))
    if candidates is None:
        candidates = candidate_matrix(n, k, rng)
    frames = mask.masked[candidates]                      # (n, C) frame indices
    anchors = np.broadcast_to(mask.masked[:, None], frames.shape)
    zc = ops.embedding(z, anchors)                         # (n, C, D)
    hc = ops.embedding(h, frames)
    logits = ops.scale(ops.cosine(zc, hc, axis=-1), 1.0 / tau)
    loss = ops.scale(ops.sum(ops.log_softmax(logits, axis=-1)[:, 0]), -1.0)
    return ops.scale(loss, 1.0 / n) if normalized else loss


def l2_layer_loss(z, h, mask: MaskSpec, normalized: bool = True) -> Tensor:
    """Squared error summed over masked frames; ``normalized`` divides by ``D * |T|``."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    h = h if isinstance(h, Tensor) else Tensor(h)
    if z.shape != h.shape:
        raise ConfigurationError(f"student {z.shape} and teacher {h.shape} representations differ in shape")
    n = len(mask)
    if n == 0:
        return Tensor(np.zeros((), dtype=z.dtype))
    diff = ops.sub(z[mask.masked], h[mask.masked])
    loss = ops.sum(ops.mul(diff, diff))
    return ops.scale(loss, 1.0 / (z.shape[-1] * n)) if normalized else loss


def init_heads(layer_map: LayerMap, student_dim: int, teacher_dim: int, seed: int,
               projection: str = "linear_per_layer", dtype=np.float32) -> dict[str, np.ndarray]:
    """Per-student-layer affine maps into the teacher width; empty when not needed."""
    if projection == "none":
        if student_dim != teacher_dim:
            raise ConfigurationError(
                f"projection 'none' needs equal widths, got student {student_dim} vs teacher {teacher_dim}",
                key="projection")
        return {}
    heads = {}
    bound = 1.0 / math.sqrt(student_dim)
    for layer in layer_map.student:
        rng = np.random.default_rng([int(seed), layer])
        heads[f"heads.{layer}.weight"] = rng.uniform(-bound, bound, (student_dim, teacher_dim)).astype(dtype)
        heads[f"heads.{layer}.bias"] = np.zeros(teacher_dim, dtype=dtype)
    return heads


def instance_norm(h: np.ndarray, length: int | None = None, eps: float = 1e-5) -> np.ndarray:
    """Normalize each channel over the (unpadded) time axis."""
    length = h.shape[0] if length is None else length
    real = h[:length]
    mu = real.mean(axis=0, keepdims=True)
    sd = np.sqrt(real.var(axis=0, keepdims=True) + eps)
    out = np.zeros_like(h)
    out[:length] = (real - mu) / sd
    return out


def _as_batch(x):
    if isinstance(x, Tensor):
        return x if x.ndim == 3 else ops.reshape(x, (1,) + x.shape)
    x = np.asarray(x)
    return x if x.ndim == 3 else x[None]


def total_loss(
    student_taps: Mapping[int, object],
    teacher_taps: Mapping[int, object],
    heads: Mapping[str, object] | None,
    layer_map: LayerMap,
    masks: MaskSpec | Sequence[MaskSpec],
    cfg: DistillConfig,
    rng: np.random.Generator,
    lengths: Sequence[int] | None = None,
    tap_hook=None,
) -> tuple[Tensor, list[float]]:
    """Batch loss: per-utterance mean over mapped layers, then mean over utterances.

    Tap mappings hold (B, T, D) or (T, D) tensors keyed by 1-based layer
    (a :class:`~colld.encoder.TapSet` works). Utterances with an empty mask
    are left out of the batch mean. ``tap_hook(layer, tensor)`` may wrap each
    student tap before it enters the loss. Returns the loss and the per-layer
    losses averaged over contributing utterances.
    """
    student_taps = getattr(student_taps, "reps", student_taps)
    teacher_taps = getattr(teacher_taps, "reps", teacher_taps)
    if isinstance(masks, MaskSpec):
        masks = [masks]
    missing_s = [l for l in layer_map.student if l not in student_taps]
    missing_t = [t for t in layer_map.teacher if t not in teacher_taps]
    if missing_s or missing_t:
        raise UsageError(f"taps missing for student layers {missing_s} / teacher layers {missing_t}")

    s_taps = {l: _as_batch(student_taps[l]) for l in layer_map.student}
    t_taps = {t: _as_batch(teacher_taps[t]) for t in layer_map.teacher}
    bsz = s_taps[layer_map.student[0]].shape[0]
    if len(masks) != bsz:
        raise UsageError(f"{len(masks)} masks for a batch of {bsz} utterances")
    if lengths is None:
        lengths = [s_taps[layer_map.student[0]].shape[1]] * bsz

    # project every student layer once for the whole batch
    projected = {}
    for l in layer_map.student:
        z = s_taps[l]
        z = z if isinstance(z, Tensor) else Tensor(z)
        if tap_hook is not None:
            z = tap_hook(l, z)
        if heads:
            z = ops.add(ops.matmul(z, heads[f"heads.{l}.weight"]), heads[f"heads.{l}.bias"])
        projected[l] = z

    per_utt, per_layer_sum = [], np.zeros(len(layer_map.pairs))
    for b, mask in enumerate(masks):
        if len(mask) == 0:
            continue
        layer_losses = []
        for j, (l, lt) in enumerate(layer_map.pairs):
            z = projected[l][b]
            h = t_taps[lt][b]
            h = h.data if isinstance(h, Tensor) else np.asarray(h)
            if cfg.target_instance_norm:
                h = instance_norm(h, lengths[b])
            if z.shape != h.shape:
                raise ConfigurationError(f"layer {l}: student {z.shape} vs teacher {h.shape}; enable a projection")
            if cfg.loss_kind == "contrastive":
                loss = contrastive_layer_loss(z, h, mask, cfg.num_distractors, cfg.temperature, rng, cfg.normalized)
            else:
                loss = l2_layer_loss(z, h, mask, cfg.normalized)
            layer_losses.append(loss)
            per_layer_sum[j] += float(loss.data)
        utt = layer_losses[0]
        for extra in layer_losses[1:]:
            utt = ops.add(utt, extra)
        if cfg.normalized:
            utt = ops.scale(utt, 1.0 / layer_map.student_layers)
        per_utt.append(utt)

    if not per_utt:
        zero = projected[layer_map.student[0]]
        return ops.scale(ops.sum(zero), 0.0), [0.0] * len(layer_map.pairs)
    total = per_utt[0]
    for extra in per_utt[1:]:
        total = ops.add(total, extra)
    total = ops.scale(total, 1.0 / len(per_utt))
    return total, list(per_layer_sum / len(per_utt))
