"""The distillation loop: frozen teacher, masked student, Adam on the combined loss."""
from __future__ import annotations

import json
import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from threadpoolctl import threadpool_limits

from . import __version__
from .autodiff import Tensor, grad, ops
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Batch, SequenceCorpus, sample_batch
from .encoder import Encoder, EncoderConfig, build_encoder, encode, encoder_from_state, param_tensors, preset
from .exceptions import ConfigurationError, NumericError, UsageError
from .losses import DistillConfig, init_heads, total_loss
from .mapping import LayerMap, layer_map
from .masking import MaskSpec, sample_mask
from .optim import OptimizerState, Schedule, adam_step, clip_grad_norm, lr_at
from .rng import stream

log = logging.getLogger(__name__)

METRIC_KEYS = ("step", "lr", "loss", "loss_per_layer", "collapse", "elapsed_ms")
MAX_EMPTY_REDRAWS = 100


def collapse_metric(reps: np.ndarray, rng: np.random.Generator | None = None, max_pairs: int = 2000) -> float:
    """Mean cosine similarity over distinct frame pairs; 1.0 means every frame points the same way.

    All pairs are used when there are at most ``max_pairs`` of them, otherwise
    ``max_pairs`` pairs are drawn uniformly.
    """
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 2 or reps.shape[0] < 2:
        raise UsageError(f"collapse_metric needs at least 2 frames, got shape {reps.shape}")
    norms = np.linalg.norm(reps, axis=1)
    if not np.any(norms > 0):
        raise NumericError("collapse_metric: all representations are zero")
    unit = reps / np.maximum(norms, 1e-12)[:, None]
    n = reps.shape[0]
    if n * (n - 1) // 2 <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        i = rng.integers(0, n, size=max_pairs)
        j = rng.integers(0, n - 1, size=max_pairs)
        j = j + (j >= i)
    return float(np.mean(np.sum(unit[i] * unit[j], axis=1)))


def schedule_of(cfg: DistillConfig) -> Schedule:
    return Schedule(cfg.peak_lr, cfg.warmup_steps, cfg.total_steps)


@dataclass
class TrainState:
    student: Encoder
    heads: dict[str, np.ndarray]
    optimizer: OptimizerState
    cfg: DistillConfig
    root_seed: int
    history: list[dict] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.optimizer.step

    def parameters(self) -> dict[str, np.ndarray]:
        out = {name: self.student.params[name] for name in self.student.params}
        out.update(self.heads)
        return out

    def assign(self, new: dict[str, np.ndarray]) -> None:
        for name, value in new.items():
            if name in self.heads:
                self.heads[name] = value
            else:
                self.student.params[name] = value


def new_train_state(cfg: DistillConfig, teacher: Encoder, student: Encoder, root_seed: int) -> TrainState:
    lmap = layer_map(student.config.layers, teacher.config.layers)
    heads = init_heads(lmap, student.config.dim, teacher.config.dim, seed=int(stream(root_seed, "init_heads")
                       .integers(2**31)), projection=cfg.projection, dtype=student.dtype)
    opt = OptimizerState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    return TrainState(student, heads, opt, cfg, int(root_seed))


def init_from_teacher(student: Encoder, teacher: Encoder, mode: str) -> None:
    """Copy teacher blocks into a width-matched student.

    ``layer_skipping`` copies the mapped teacher layer into each student layer;
    ``bottom_layers`` copies teacher layers 1..L_S.
    """
    s, t = student.config, teacher.config
    if (s.dim, s.ffn, s.heads, s.conv_kernel, s.input_dim) != (t.dim, t.ffn, t.heads, t.conv_kernel, t.input_dim):
        raise ConfigurationError("init_from_teacher needs a student with the teacher's widths", key="init_from_teacher")
    if mode == "layer_skipping":
        pairs = layer_map(s.layers, t.layers).pairs
    elif mode == "bottom_layers":
        pairs = tuple((i, i) for i in range(1, s.layers + 1))
    else:
        raise ConfigurationError(f"unknown init mode {mode!r}", key="init_from_teacher")
    for name in ("input.weight", "input.bias", "mask_embedding"):
        student.params[name] = teacher.params[name].copy()
    for ls, lt in pairs:
        src = f"blocks.{lt}."
        for name in teacher.params:
            if name.startswith(src):
                student.params[f"blocks.{ls}." + name[len(src):]] = teacher.params[name].copy()


def draw_masks(batch: Batch, cfg: DistillConfig, root_seed: int, step: int) -> list[MaskSpec]:
    masks = []
    for b, length in enumerate(batch.lengths):
        rng = stream(root_seed, "mask", step, b)
        mask = sample_mask(int(length), cfg.mask_prob, cfg.mask_span, rng)
        if cfg.empty_mask == "redraw" and cfg.mask_prob > 0:
            for _ in range(MAX_EMPTY_REDRAWS):
                if len(mask):
                    break
                mask = sample_mask(int(length), cfg.mask_prob, cfg.mask_span, rng)
        masks.append(mask)
    return masks


def masked_bool(masks: list[MaskSpec], t_max: int) -> np.ndarray:
    return np.stack([m.as_bool(t_max) for m in masks])


def teacher_taps(teacher: Encoder, batch: Batch, lmap: LayerMap, tap_kind: str) -> dict[int, np.ndarray]:
    taps, _ = encode(teacher, batch.features, batch.lengths, None, lmap.teacher, tap_kind)
    return {layer: t.data for layer, t in taps.items()}


def step_loss(state: TrainState, teacher: Encoder, batch: Batch, masks: list[MaskSpec], lmap: LayerMap,
              distractor_rng: np.random.Generator, tap_hook=None):
    """Forward both models and build the loss graph; returns (loss, per_layer, tensors, student taps)."""
    cfg = state.cfg
    targets = teacher_taps(teacher, batch, lmap, cfg.tap_kind)
    s_params = param_tensors(state.student, requires_grad=True)
    h_params = {n: Tensor(v, requires_grad=True, name=n) for n, v in state.heads.items()}
    s_taps, _ = encode(state.student, batch.features, batch.lengths, masked_bool(masks, batch.features.shape[1]),
                       None, cfg.tap_kind, params=s_params)
    loss, per_layer = total_loss(s_taps, targets, h_params, lmap, masks, cfg, distractor_rng,
                                 lengths=batch.lengths, tap_hook=tap_hook)
    return loss, per_layer, {**s_params, **h_params}, s_taps


def train_step(state: TrainState, teacher: Encoder, corpus, lmap: LayerMap, tap_hook=None,
               clock_start: float | None = None) -> dict:
    """One update; appends and returns the metric record."""
    cfg = state.cfg
    k = state.step
    lr = lr_at(k + 1, schedule_of(cfg))
    batch = sample_batch(corpus, cfg.batch_size, stream(state.root_seed, "data", k))
    masks = draw_masks(batch, cfg, state.root_seed, k)
    loss, per_layer, tensors, s_taps = step_loss(state, teacher, batch, masks, lmap,
                                                 stream(state.root_seed, "distractors", k), tap_hook)
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite loss at step {k + 1}, batch utterances {batch.ids}")
    names = list(tensors)
    grads = dict(zip(names, grad(loss, [tensors[n] for n in names])))
    clip_grad_norm(grads, cfg.clip_norm)
    state.assign(adam_step(state.parameters(), grads, state.optimizer, lr))

    collapse = None
    if (k + 1) % cfg.collapse_every == 0 or k == 0:
        final = s_taps[state.student.config.layers].data
        reps = np.concatenate([final[b, :n] for b, n in enumerate(batch.lengths)])
        collapse = collapse_metric(reps, stream(state.root_seed, "collapse", k))
    elapsed = None
    if cfg.log_wallclock and clock_start is not None:
        elapsed = round((time.perf_counter() - clock_start) * 1000.0, 3)
    record = {"step": k + 1, "lr": lr, "loss": float(loss.data), "loss_per_layer": [float(x) for x in per_layer],
              "collapse": collapse, "elapsed_ms": elapsed}
    state.history.append(record)
    return record


def determinism(enabled: bool):
    return threadpool_limits(limits=1) if enabled else nullcontext()


def distill(cfg: DistillConfig, teacher: Encoder, student: Encoder, corpus, steps: int, root_seed: int = 0,
            run_dir=None, state: TrainState | None = None,
            callback: Callable[[TrainState, dict], None] | None = None) -> TrainState:
    """Run ``steps`` updates (continuing ``state`` if given).

    With ``run_dir`` set, metric records are appended to ``metrics.jsonl`` and
    checkpoints written every ``cfg.checkpoint_every`` steps and at the end.
    The teacher is only read.
    """
    if steps < 0:
        raise UsageError(f"steps must be >= 0, got {steps}")
    lmap = layer_map(student.config.layers, teacher.config.layers)
    if getattr(corpus, "input_dim", student.config.input_dim) != student.config.input_dim:
        raise ConfigurationError(f"corpus width {corpus.input_dim} != student input_dim {student.config.input_dim}")
    if teacher.config.input_dim != student.config.input_dim:
        raise ConfigurationError("teacher and student must share input_dim")
    if state is None:
        if cfg.init_from_teacher:
            init_from_teacher(student, teacher, cfg.init_from_teacher)
        state = new_train_state(cfg, teacher, student, root_seed)
    if state.step + steps > cfg.total_steps:
        raise ConfigurationError(f"running to step {state.step + steps} exceeds total_steps {cfg.total_steps}",
                                 key="total_steps")
    metrics = ckpt_dir = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        metrics = open(run_dir / "metrics.jsonl", "a")
    start = time.perf_counter()
    try:
        with determinism(cfg.deterministic):
            for _ in range(steps):
                record = train_step(state, teacher, corpus, lmap, clock_start=start)
                if metrics is not None:
                    metrics.write(json.dumps(record) + "\n")
                    metrics.flush()
                if ckpt_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                    save_train_state(ckpt_dir / f"step_{state.step:06d}.ckpt", state, teacher.config)
                if callback is not None:
                    callback(state, record)
                if state.step % 50 == 0:
                    log.info("step %d loss %.4f", state.step, record["loss"])
        if ckpt_dir is not None and steps:
            save_train_state(ckpt_dir / "last.ckpt", state, teacher.config)
    finally:
        if metrics is not None:
            metrics.close()
    return state


def save_train_state(path, state: TrainState, teacher_config: EncoderConfig | None = None) -> None:
    tensors = {f"student/{n}": state.student.params[n] for n in state.student.params}
    tensors.update({f"heads/{n}": v for n, v in state.heads.items()})
    tensors.update({f"opt.m/{n}": v for n, v in state.optimizer.m.items()})
    tensors.update({f"opt.v/{n}": v for n, v in state.optimizer.v.items()})
    opt = state.optimizer
    header = {
        "kind": "train_state",
        "tool_version": __version__,
        "step": state.step,
        "root_seed": state.root_seed,
        "student_seed": state.student.seed,
        "config": state.student.config.to_dict(),
        "teacher_config": teacher_config.to_dict() if teacher_config else None,
        "distill": state.cfg.to_dict(),
        "optimizer": {"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                      "weight_decay": opt.weight_decay},
    }
    save_checkpoint(path, tensors, header)


def load_train_state(path) -> TrainState:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "train_state":
        raise ConfigurationError(f"{path} is not a training checkpoint")
    config = EncoderConfig.from_dict(header["config"])
    student = encoder_from_state(config, tensors, header.get("student_seed", 0), prefix="student/")
    heads = {n[len("heads/"):]: v for n, v in tensors.items() if n.startswith("heads/")}
    o = header["optimizer"]
    opt = OptimizerState(step=o["step"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                         weight_decay=o["weight_decay"])
    opt.m = {n[len("opt.m/"):]: v for n, v in tensors.items() if n.startswith("opt.m/")}
    opt.v = {n[len("opt.v/"):]: v for n, v in tensors.items() if n.startswith("opt.v/")}
    return TrainState(student, heads, opt, DistillConfig.from_dict(header["distill"]), header["root_seed"])


def alignment(state: TrainState, teacher: Encoder, corpus, num_utterances: int = 8, seed: int = 0) -> list[float]:
    """Mean cosine between projected student taps and teacher targets over masked frames, per mapped layer.

    Uses a fixed batch and fixed masks drawn from ``seed`` so values at
    different training steps are comparable.
    """
    cfg = state.cfg
    lmap = layer_map(state.student.config.layers, teacher.config.layers)
    batch = sample_batch(corpus, num_utterances, stream(seed, "eval"))
    masks = draw_masks(batch, cfg, seed + 1, 0)
    targets = teacher_taps(teacher, batch, lmap, cfg.tap_kind)
    s_taps, _ = encode(state.student, batch.features, batch.lengths, masked_bool(masks, batch.features.shape[1]),
                       lmap.student, cfg.tap_kind)
    out = []
    for l, lt in lmap.pairs:
        z = s_taps[l].data
        if state.heads:
            z = z @ state.heads[f"heads.{l}.weight"] + state.heads[f"heads.{l}.bias"]
        cos = []
        for b, m in enumerate(masks):
            if len(m):
                cos.append(ops.cosine(z[b, m.masked], targets[lt][b, m.masked]).data)
        out.append(float(np.mean(np.concatenate(cos))) if cos else float("nan"))
    return out


def write_metrics(history: list[dict], path) -> None:
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record) + "\n")


def _resolve_config(student_config) -> EncoderConfig:
    if isinstance(student_config, EncoderConfig):
        return student_config
    if isinstance(student_config, str):
        return preset(student_config)
    if isinstance(student_config, dict):
        return EncoderConfig.from_dict(student_config)
    raise ConfigurationError(f"cannot interpret student_config {student_config!r}")


class CoLLDDistiller(TransformerMixin, BaseEstimator):
    """Distill a frozen teacher into a fresh student, scikit-learn style.

    ``fit`` takes frame-stacked utterances (arrays or
    :class:`~colld.features.FeatureSequence`) or any corpus object and trains
    the student; ``transform`` returns frozen block outputs of ``output_layer``
    (last layer by default), one (frames, dim) array per utterance.
    """

    def __init__(self, teacher=None, student_config="tiny", student_layers=2, steps=500, seed=0,
                 loss_kind="contrastive", temperature=0.1, num_distractors=100, tap_kind="ffn2",
                 projection="linear_per_layer", target_instance_norm=False, mask_prob=0.065, mask_span=10,
                 peak_lr=1e-4, warmup_steps=None, batch_size=4, weight_decay=1e-2, clip_norm=10.0,
                 output_layer=None, distill_options=None):
        self.teacher = teacher
        self.student_config = student_config
        self.student_layers = student_layers
        self.steps = steps
        self.seed = seed
        self.loss_kind = loss_kind
        self.temperature = temperature
        self.num_distractors = num_distractors
        self.tap_kind = tap_kind
        self.projection = projection
        self.target_instance_norm = target_instance_norm
        self.mask_prob = mask_prob
        self.mask_span = mask_span
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.output_layer = output_layer
        self.distill_options = distill_options

    def _distill_config(self) -> DistillConfig:
        total = max(int(self.steps), 1)
        warmup = self.warmup_steps if self.warmup_steps is not None else max(1, total // 10)
        opts = dict(loss_kind=self.loss_kind, temperature=self.temperature, num_distractors=self.num_distractors,
                    tap_kind=self.tap_kind, projection=self.projection,
                    target_instance_norm=self.target_instance_norm, mask_prob=self.mask_prob,
                    mask_span=self.mask_span, peak_lr=self.peak_lr, warmup_steps=min(warmup, total),
                    total_steps=total, batch_size=self.batch_size, weight_decay=self.weight_decay,
                    clip_norm=self.clip_norm, checkpoint_every=0)
        opts.update(self.distill_options or {})
        return DistillConfig(**opts)

    def _corpus(self, X):
        if hasattr(X, "__getitem__") and hasattr(X, "input_dim") and not isinstance(X, np.ndarray):
            return X
        from .validation import check_sequences
        return SequenceCorpus(check_sequences(X))

    def fit(self, X, y=None):
        if self.teacher is None:
            raise ConfigurationError("a teacher encoder is required", key="teacher")
        corpus = self._corpus(X)
        config = _resolve_config(self.student_config)
        overrides = {"input_dim": self.teacher.config.input_dim}
        if self.student_layers is not None:
            overrides["layers"] = self.student_layers
        config = replace(config, **overrides)
        student = build_encoder(config, seed=int(stream(self.seed, "init_student").integers(2**31)))
        cfg = self._distill_config()
        self.state_ = distill(cfg, self.teacher, student, corpus, int(self.steps), root_seed=self.seed)
        self.student_ = self.state_.student
        self.heads_ = self.state_.heads
        self.history_ = self.state_.history
        self.layer_map_ = layer_map(config.layers, self.teacher.config.layers)
        return self

    def transform(self, X):
        check_is_fitted(self, "student_")
        from .probe import extract_frozen
        layer = self.output_layer or self.student_.config.layers
        reps, _ = extract_frozen(self.student_, self._corpus(X), layer)
        return reps
