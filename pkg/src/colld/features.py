"""Filterbank-style feature sequences: synthesis, binary I/O, and frame stacking.

Binary layout of a feature file (little-endian throughout)::

    offset  size  field
    0       4     magic b"CLLD"
    4       2     format version (u16) = 1
    6       4     dim (u32)
    10      4     frames (u32)
    14      4     rate_hz (u32)
    18      ...   frames * dim float32 values, row-major

A manifest is JSON lines, one ``{"id", "path", "frames", "dim"}`` object per
utterance; an optional ``"labels"`` key names a ``.npy`` file of per-frame
integer labels. Relative paths resolve against the manifest's directory.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigurationError, FormatError, NumericError, UsageError
from .validation import check_positive_int, check_sequences

MAGIC = b"CLLD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIII")


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    values: np.ndarray
    rate_hz: int = 100
    utterance_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ConfigurationError(f"feature values must be frames x dim with both >= 1, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericError(f"utterance {self.utterance_id!r} has non-finite feature values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        # utterance ids are metadata and do not take part in equality
        return (self.rate_hz == other.rate_hz
                and self.values.shape == other.values.shape
                and self.values.tobytes() == other.values.tobytes())

    __hash__ = None


def stack_frames(seq: FeatureSequence, factor: int) -> FeatureSequence:
    """Concatenate each run of ``factor`` consecutive frames; a trailing remainder is dropped."""
    if isinstance(factor, bool) or int(factor) != factor or factor < 1:
        raise UsageError(f"stacking factor must be an integer >= 1, got {factor!r}")
    factor = int(factor)
    if factor == 1:
        return seq
    n = seq.frames // factor
    if n < 1:
        raise UsageError(f"utterance {seq.utterance_id!r} has {seq.frames} frames, fewer than factor {factor}")
    stacked = seq.values[: n * factor].reshape(n, factor * seq.dim)
    return FeatureSequence(stacked, rate_hz=seq.rate_hz // factor, utterance_id=seq.utterance_id)


def stack_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Frame labels aligned with :func:`stack_frames` output (first frame of each group)."""
    n = len(labels) // factor
    return np.asarray(labels[: n * factor: factor])


def class_prototypes(num_classes: int, dim: int, class_seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """Per-class mean vectors shared by every utterance drawn with the same ``class_seed``."""
    rng = np.random.default_rng([int(class_seed), num_classes, dim])
    return rng.normal(0.0, scale, size=(num_classes, dim))


def synth_features(
    seed: int,
    frames: int,
    dim: int = 80,
    num_classes: int = 4,
    *,
    class_seed: int = 0,
    class_scale: float = 1.0,
    noise: float = 1.0,
    smoothing: int = 3,
    min_segment: int = 20,
    max_segment: int = 60,
    rate_hz: int = 100,
) -> tuple[FeatureSequence, np.ndarray]:
    """Draw a class-structured utterance and its per-frame labels.

    Labels form contiguous segments of ``min_segment``..``max_segment`` frames.
    Each frame is its class prototype plus isotropic Gaussian noise; the result
    is then smoothed with a moving average of ``smoothing`` frames, so adjacent
    frames are correlated.
    """
    frames = check_positive_int(frames, "frames")
    dim = check_positive_int(dim, "dim")
    num_classes = check_positive_int(num_classes, "num_classes")
    rng = np.random.default_rng([int(seed), 7919])
    protos = class_prototypes(num_classes, dim, class_seed, class_scale)

    labels = np.empty(frames, dtype=np.int64)
    t, prev = 0, -1
    while t < frames:
        length = int(rng.integers(min_segment, max_segment + 1))
        if num_classes == 1:
            cls = 0
        elif prev < 0:
            cls = int(rng.integers(0, num_classes))
        else:
            # never repeat the previous class
            cls = int(rng.integers(0, num_classes - 1))
            if cls >= prev:
                cls += 1
        labels[t:t + length] = cls
        prev = cls
        t += length

    values = protos[labels] + rng.normal(0.0, noise, size=(frames, dim))
    if smoothing > 1:
        kernel = np.ones(smoothing) / smoothing
        padded = np.pad(values, ((smoothing // 2, smoothing - 1 - smoothing // 2), (0, 0)), mode="edge")
        values = np.stack([np.convolve(padded[:, j], kernel, mode="valid") for j in range(dim)], axis=1)
    return FeatureSequence(values, rate_hz=rate_hz, utterance_id=f"synth-{seed}"), labels


def write_features(seq: FeatureSequence, path) -> None:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, seq.dim, seq.frames, int(seq.rate_hz))
    payload = np.ascontiguousarray(seq.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_header(path) -> tuple[int, int, int]:
    """``(dim, frames, rate_hz)`` from a feature file header."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    return _parse_header(raw)


def _parse_header(raw: bytes) -> tuple[int, int, int]:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} of {_HEADER.size} bytes", offset=len(raw))
    _, version, dim, frames, rate = _HEADER.unpack(raw[:_HEADER.size])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    if dim < 1:
        raise FormatError("dim must be >= 1", offset=6)
    if frames < 1:
        raise FormatError("frames must be >= 1", offset=10)
    return dim, frames, rate


def read_features(path, utterance_id: str | None = None) -> FeatureSequence:
    raw = Path(path).read_bytes()
    dim, frames, rate = _parse_header(raw)
    expected = frames * dim * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(
            f"payload holds {len(payload)} bytes but header declares {frames} x {dim} float32 ({expected} bytes)",
            offset=_HEADER.size + min(len(payload), expected),
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(frames, dim).astype(np.float32)
    uid = utterance_id if utterance_id is not None else Path(path).stem
    return FeatureSequence(values, rate_hz=rate, utterance_id=uid)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    frames: int
    dim: int
    labels: str | None = None  # optional .npy of per-frame integer labels


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: str = "."

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ConfigurationError(f"duplicate utterance ids in manifest: {dupes}")

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> str:
        return entry.path if os.path.isabs(entry.path) else os.path.join(self.root, entry.path)

    def load(self, index: int) -> FeatureSequence:
        entry = self.entries[index]
        return read_features(self.resolve(entry), utterance_id=entry.id)

    def load_labels(self, index: int) -> np.ndarray | None:
        entry = self.entries[index]
        if entry.labels is None:
            return None
        path = entry.labels if os.path.isabs(entry.labels) else os.path.join(self.root, entry.labels)
        labels = np.load(path, allow_pickle=False)
        if labels.shape != (entry.frames,):
            raise FormatError(f"labels for {entry.id!r} have shape {labels.shape}, expected ({entry.frames},)")
        return labels.astype(np.int64, copy=False)

    def validate(self) -> None:
        for entry in self.entries:
            dim, frames, _ = read_header(self.resolve(entry))
            if (frames, dim) != (entry.frames, entry.dim):
                raise FormatError(
                    f"manifest entry {entry.id!r} records {entry.frames}x{entry.dim} "
                    f"but file header says {frames}x{dim}"
                )


def read_manifest(path, validate: bool = True) -> Manifest:
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                labels = obj.get("labels")
                entries.append(ManifestEntry(str(obj["id"]), str(obj["path"]), int(obj["frames"]), int(obj["dim"]),
                                             None if labels is None else str(labels)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ConfigurationError(f"manifest line {lineno}: {exc}") from exc
    manifest = Manifest(entries, root=str(Path(path).parent))
    if validate:
        manifest.validate()
    return manifest


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w") as fh:
        for e in manifest.entries:
            row = {"id": e.id, "path": e.path, "frames": e.frames, "dim": e.dim}
            if e.labels is not None:
                row["labels"] = e.labels
            fh.write(json.dumps(row) + "\n")


class FrameStacker(TransformerMixin, BaseEstimator):
    """Stateless transformer that stacks consecutive frames of each sequence."""

    def __init__(self, factor=2):
        self.factor = factor

    def fit(self, X, y=None):
        check_positive_int(self.factor, "factor")
        return self

    def transform(self, X):
        seqs = check_sequences(X)
        out = []
        for seq in seqs:
            if not isinstance(seq, FeatureSequence):
                seq = FeatureSequence(seq)
            out.append(stack_frames(seq, self.factor))
        return out
