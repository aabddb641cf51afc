"""Utterance corpora and padded batch assembly."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import ConfigurationError
from .features import FeatureSequence, Manifest, stack_frames, stack_labels, synth_features


@dataclass
class Batch:
    features: np.ndarray          # (B, T_max, F), zero padded
    lengths: np.ndarray           # (B,)
    ids: list[str]
    labels: list[np.ndarray | None]


class SyntheticCorpus:
    """A fixed set of class-structured utterances, already frame-stacked.

    Utterance ``i`` is drawn from seed ``seed * 1_000_003 + i``; lengths (in
    input frames, before stacking) are uniform in ``[min_frames, max_frames]``.
    All utterances share class prototypes through ``class_seed``.
    """

    def __init__(self, num_utterances=64, min_frames=200, max_frames=200, feature_dim=80, num_classes=4,
                 stack_factor=2, seed=0, class_seed=0, class_scale=1.0, noise=1.0, smoothing=3,
                 min_segment=20, max_segment=60):
        if num_utterances < 1:
            raise ConfigurationError("num_utterances must be >= 1", key="num_utterances")
        if not 1 <= min_frames <= max_frames:
            raise ConfigurationError("need 1 <= min_frames <= max_frames", key="min_frames")
        self.num_utterances = num_utterances
        self.min_frames = min_frames
        self.max_frames = max_frames
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.stack_factor = stack_factor
        self.seed = seed
        self.synth_kwargs = dict(class_seed=class_seed, class_scale=class_scale, noise=noise,
                                 smoothing=smoothing, min_segment=min_segment, max_segment=max_segment)
        self._get = lru_cache(maxsize=None)(self._make)

    @property
    def input_dim(self) -> int:
        return self.feature_dim * self.stack_factor

    def __len__(self) -> int:
        return self.num_utterances

    def utterance_seed(self, i: int) -> int:
        return int(self.seed) * 1_000_003 + int(i)

    def _make(self, i: int) -> tuple[FeatureSequence, np.ndarray]:
        useed = self.utterance_seed(i)
        frames = int(np.random.default_rng([useed, 17]).integers(self.min_frames, self.max_frames + 1))
        seq, labels = synth_features(useed, frames, self.feature_dim, self.num_classes, **self.synth_kwargs)
        return stack_frames(seq, self.stack_factor), stack_labels(labels, self.stack_factor)

    def __getitem__(self, i: int) -> tuple[FeatureSequence, np.ndarray]:
        if not 0 <= i < self.num_utterances:
            raise IndexError(i)
        return self._get(int(i))

    def describe(self) -> dict:
        return {"source": "synthetic", "num_utterances": self.num_utterances, "min_frames": self.min_frames,
                "max_frames": self.max_frames, "feature_dim": self.feature_dim, "num_classes": self.num_classes,
                "stack_factor": self.stack_factor, "seed": self.seed, **self.synth_kwargs}


class ManifestCorpus:
    """Utterances read from feature files listed in a manifest, with labels when the manifest names them."""

    def __init__(self, manifest: Manifest, stack_factor: int = 2):
        if not len(manifest):
            raise ConfigurationError("manifest is empty", key="path")
        self.manifest = manifest
        self.stack_factor = stack_factor
        dims = {e.dim for e in manifest.entries}
        if len(dims) != 1:
            raise ConfigurationError(f"manifest mixes feature widths {sorted(dims)}")
        self.feature_dim = dims.pop()
        self._get = lru_cache(maxsize=None)(self._make)

    @property
    def input_dim(self) -> int:
        return self.feature_dim * self.stack_factor

    def __len__(self) -> int:
        return len(self.manifest)

    def _make(self, i: int):
        labels = self.manifest.load_labels(i)
        seq = stack_frames(self.manifest.load(i), self.stack_factor)
        return seq, None if labels is None else stack_labels(labels, self.stack_factor)

    def __getitem__(self, i: int):
        if not 0 <= i < len(self):
            raise IndexError(i)
        return self._get(int(i))

    def describe(self) -> dict:
        return {"source": "manifest", "num_utterances": len(self), "stack_factor": self.stack_factor}


class SequenceCorpus:
    """Wrap in-memory (already stacked) sequences, optionally with labels."""

    def __init__(self, sequences, labels=None):
        self.sequences = [s if isinstance(s, FeatureSequence) else FeatureSequence(s, utterance_id=f"utt-{i}")
                          for i, s in enumerate(sequences)]
        if not self.sequences:
            raise ConfigurationError("no sequences given")
        self.labels = list(labels) if labels is not None else [None] * len(self.sequences)
        dims = {s.dim for s in self.sequences}
        if len(dims) != 1:
            raise ConfigurationError(f"sequences mix feature widths {sorted(dims)}")
        self.input_dim = dims.pop()

    def __len__(self):
        return len(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i], self.labels[i]

    def describe(self) -> dict:
        return {"source": "memory", "num_utterances": len(self)}


def collate(items) -> Batch:
    seqs = [s for s, _ in items]
    lengths = np.array([s.frames for s in seqs])
    feats = np.zeros((len(seqs), lengths.max(), seqs[0].dim), dtype=np.float32)
    for b, s in enumerate(seqs):
        feats[b, : s.frames] = s.values
    return Batch(feats, lengths, [s.utterance_id for s in seqs], [lab for _, lab in items])


def sample_batch(corpus, batch_size: int, rng: np.random.Generator) -> Batch:
    """Utterances drawn without replacement (with replacement if the corpus is smaller)."""
    n = len(corpus)
    idx = rng.choice(n, size=batch_size, replace=batch_size > n)
    return collate([corpus[int(i)] for i in idx])
